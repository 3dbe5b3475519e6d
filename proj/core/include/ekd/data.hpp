#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <future>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ekd/tensor.hpp"

namespace ekd::data {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Images stored channel-major as raw intensities in [0, 1].
struct Dataset {
  std::size_t channels = 3;
  std::size_t resolution = 32;
  std::size_t num_classes = 10;
  std::vector<float> pixels;  // [n, channels, resolution, resolution]
  std::vector<std::int32_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * resolution * resolution; }
  std::span<const float> image(std::size_t i) const;
  std::vector<std::size_t> class_counts() const;
  /// Copy holding only the given samples, in the given order.
  Dataset select(std::span<const std::size_t> indices) const;
};

struct Normalization {
  std::vector<float> mean;
  std::vector<float> stddev;
};

/// Per-channel mean and (population) standard deviation of the raw pixels.
Normalization compute_normalization(const Dataset& dataset);

struct Augmentation {
  bool enabled = true;
  std::size_t crop_padding = 4;
  bool horizontal_flip = true;
};

enum class CifarVariant { cifar10, cifar100 };

inline constexpr std::size_t kCifarImageBytes = 3 * 32 * 32;
std::size_t cifar_record_size(CifarVariant variant);

/// Fixed-size records: label byte(s) then 3x32x32 channel-major pixels.
/// CIFAR-100 records carry coarse then fine label; the fine label is used.
Dataset load_cifar_binary(const std::filesystem::path& path, CifarVariant variant,
                          std::size_t num_classes);
Dataset parse_cifar_binary(std::span<const std::uint8_t> bytes, CifarVariant variant,
                           std::size_t num_classes);

/// IDX pair: images (ubyte, [n, rows, cols] or [n, channels, rows, cols]) and labels (ubyte, [n]).
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t num_classes);
/// Quantizes to bytes; single-channel data uses magic 0x00000803, multi-channel 0x00000804.
void write_idx(const Dataset& dataset, const std::filesystem::path& images,
               const std::filesystem::path& labels);

struct SyntheticOptions {
  std::size_t channels = 3;
  // Per-pixel Gaussian noise standard deviation.
  double noise = 0.25;
  // Upper bound of the weight given to a second, randomly chosen class pattern.
  double max_mix = 0.45;
  // Independent sample draws over the same class patterns (e.g. 0 train, 1 test).
  std::uint64_t sample_stream = 0;
};

/// Class-conditional images: a fixed smooth pattern per class, varied per
/// sample by contrast, brightness, blending with another class and noise.
Dataset synth_generate(std::size_t num_classes, std::size_t n_per_class, std::size_t resolution,
                       std::uint64_t seed, const SyntheticOptions& options = {});
/// The noiseless class patterns the generator draws from, [m, C, R, R].
std::vector<float> synth_templates(std::size_t num_classes, std::size_t resolution,
                                   std::uint64_t seed, std::size_t channels = 3);

/// Keeps floor(fraction * n_class) samples of every class (at least one),
/// drawn uniformly without replacement; retained samples keep their order.
Dataset subset_few_sample(const Dataset& dataset, double retain_fraction, std::uint64_t seed);

/// Bilinear resampling (half-pixel centers) of every channel to target x target.
Dataset downsample(const Dataset& dataset, std::size_t target);

struct LabeledBatch {
  ad::Tensor<float> images;  // [batch, C, H, W], normalized
  std::vector<std::int32_t> labels;
  std::vector<std::size_t> indices;  // dataset rows, in batch order

  std::size_t size() const { return labels.size(); }
};

/// Shuffled partition of [0, n) into batches; a pure function of (seed, epoch).
std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed, std::size_t epoch);
/// Unshuffled partition, for evaluation.
std::vector<std::vector<std::size_t>> sequential_batches(std::size_t n, std::size_t batch_size);

/// Builds one batch. With augmentation enabled, crops and flips depend only on
/// (aug_seed, epoch, dataset index).
LabeledBatch make_batch(const Dataset& dataset, std::span<const std::size_t> indices,
                        const Normalization& norm, const Augmentation& augmentation,
                        std::uint64_t aug_seed, std::size_t epoch);

/// Shuffle, augment and batch a whole epoch. The last partial batch is kept.
std::vector<LabeledBatch> augment_and_batch(const Dataset& dataset, std::size_t batch_size,
                                            std::size_t epoch, std::uint64_t seed,
                                            const Normalization& norm,
                                            const Augmentation& augmentation);

/// Produces items 0..count-1 in order, computing up to `workers` of them ahead
/// on background threads. Output never depends on the worker count.
template <typename Item>
class OrderedPrefetcher {
 public:
  OrderedPrefetcher(std::size_t count, std::size_t workers, std::function<Item(std::size_t)> make)
      : count_(count), workers_(workers), make_(std::move(make)) {}

  std::optional<Item> next() {
    if (consumed_ == count_) return std::nullopt;
    if (workers_ <= 1) return make_(consumed_++);
    while (pending_.size() < workers_ && issued_ < count_) {
      pending_.push_back(std::async(std::launch::async, make_, issued_++));
    }
    Item item = pending_.front().get();
    pending_.pop_front();
    ++consumed_;
    return item;
  }

 private:
  std::size_t count_;
  std::size_t workers_;
  std::function<Item(std::size_t)> make_;
  std::deque<std::future<Item>> pending_;
  std::size_t issued_ = 0;
  std::size_t consumed_ = 0;
};

}  // namespace ekd::data
