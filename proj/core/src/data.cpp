#include "ekd/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

#include "ekd/random.hpp"

namespace ekd::data {

std::span<const float> Dataset::image(std::size_t i) const {
  return std::span<const float>(pixels).subspan(i * image_size(), image_size());
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (auto y : labels) ++counts[static_cast<std::size_t>(y)];
  return counts;
}

Dataset Dataset::select(std::span<const std::size_t> indices) const {
  Dataset out;
  out.channels = channels;
  out.resolution = resolution;
  out.num_classes = num_classes;
  out.pixels.reserve(indices.size() * image_size());
  out.labels.reserve(indices.size());
  for (auto i : indices) {
    const auto img = image(i);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
    out.labels.push_back(labels[i]);
  }
  return out;
}

Normalization compute_normalization(const Dataset& dataset) {
  if (dataset.size() == 0) throw DataError("cannot compute normalization of an empty dataset");
  const std::size_t plane = dataset.resolution * dataset.resolution;
  Normalization norm;
  for (std::size_t c = 0; c < dataset.channels; ++c) {
    double sum = 0, sq = 0;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      const float* p = dataset.pixels.data() + i * dataset.image_size() + c * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        sum += p[k];
        sq += static_cast<double>(p[k]) * p[k];
      }
    }
    const double n = static_cast<double>(dataset.size() * plane);
    const double mean = sum / n;
    const double var = std::max(sq / n - mean * mean, 1e-12);
    norm.mean.push_back(static_cast<float>(mean));
    norm.stddev.push_back(static_cast<float>(std::sqrt(var)));
  }
  return norm;
}

std::size_t cifar_record_size(CifarVariant variant) {
  return (variant == CifarVariant::cifar10 ? 1 : 2) + kCifarImageBytes;
}

Dataset parse_cifar_binary(std::span<const std::uint8_t> bytes, CifarVariant variant,
                           std::size_t num_classes) {
  const std::size_t record = cifar_record_size(variant);
  if (bytes.size() % record != 0) {
    throw DataError("CIFAR file of " + std::to_string(bytes.size()) +
                    " bytes is not a whole number of " + std::to_string(record) + "-byte records");
  }
  const std::size_t label_bytes = record - kCifarImageBytes;
  Dataset ds;
  ds.channels = 3;
  ds.resolution = 32;
  ds.num_classes = num_classes;
  const std::size_t n = bytes.size() / record;
  ds.pixels.reserve(n * kCifarImageBytes);
  ds.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * record;
    const std::uint8_t label = rec[label_bytes - 1];
    if (label >= num_classes) {
      throw DataError("record " + std::to_string(i) + " has label " + std::to_string(label) +
                      " >= " + std::to_string(num_classes) + " classes");
    }
    ds.labels.push_back(label);
    for (std::size_t k = 0; k < kCifarImageBytes; ++k)
      ds.pixels.push_back(static_cast<float>(rec[label_bytes + k]) / 255.0f);
  }
  return ds;
}

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + path.string());
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t at,
                        const std::filesystem::path& path) {
  if (at + 4 > b.size()) throw DataError(path.string() + ": truncated IDX header");
  return (std::uint32_t(b[at]) << 24) | (std::uint32_t(b[at + 1]) << 16) |
         (std::uint32_t(b[at + 2]) << 8) | std::uint32_t(b[at + 3]);
}

void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  b.push_back(static_cast<std::uint8_t>(v >> 24));
  b.push_back(static_cast<std::uint8_t>(v >> 16));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
  b.push_back(static_cast<std::uint8_t>(v));
}

struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::size_t offset = 0;
};

IdxArray parse_idx_header(const std::vector<std::uint8_t>& b, const std::filesystem::path& path) {
  const std::uint32_t magic = read_be32(b, 0, path);
  if ((magic >> 16) != 0 || ((magic >> 8) & 0xff) != 0x08) {
    throw DataError(path.string() + ": only unsigned-byte IDX files are supported");
  }
  IdxArray a;
  const std::size_t ndims = magic & 0xff;
  for (std::size_t d = 0; d < ndims; ++d) a.dims.push_back(read_be32(b, 4 + 4 * d, path));
  a.offset = 4 + 4 * ndims;
  std::size_t n = 1;
  for (auto d : a.dims) n *= d;
  if (b.size() != a.offset + n) {
    throw DataError(path.string() + ": expected " + std::to_string(a.offset + n) +
                    " bytes, found " + std::to_string(b.size()));
  }
  return a;
}

}  // namespace

Dataset load_cifar_binary(const std::filesystem::path& path, CifarVariant variant,
                          std::size_t num_classes) {
  const auto bytes = read_file(path);
  try {
    return parse_cifar_binary(bytes, variant, num_classes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels,
                 std::size_t num_classes) {
  const auto ib = read_file(images);
  const auto lb = read_file(labels);
  const IdxArray ia = parse_idx_header(ib, images);
  const IdxArray la = parse_idx_header(lb, labels);
  if (la.dims.size() != 1) throw DataError(labels.string() + ": labels must be one-dimensional");
  Dataset ds;
  ds.num_classes = num_classes;
  if (ia.dims.size() == 3) {
    ds.channels = 1;
  } else if (ia.dims.size() == 4) {
    ds.channels = ia.dims[1];
  } else {
    throw DataError(images.string() + ": images must have 3 or 4 dimensions");
  }
  const std::size_t rows = ia.dims[ia.dims.size() - 2];
  const std::size_t cols = ia.dims.back();
  if (rows != cols) throw DataError(images.string() + ": only square images are supported");
  ds.resolution = rows;
  if (ia.dims[0] != la.dims[0]) {
    throw DataError("IDX image count " + std::to_string(ia.dims[0]) + " differs from label count " +
                    std::to_string(la.dims[0]));
  }
  ds.pixels.reserve(ib.size() - ia.offset);
  for (std::size_t k = ia.offset; k < ib.size(); ++k)
    ds.pixels.push_back(static_cast<float>(ib[k]) / 255.0f);
  for (std::size_t k = la.offset; k < lb.size(); ++k) {
    if (lb[k] >= num_classes) {
      throw DataError(labels.string() + ": label " + std::to_string(lb[k]) + " >= " +
                      std::to_string(num_classes) + " classes");
    }
    ds.labels.push_back(lb[k]);
  }
  return ds;
}

void write_idx(const Dataset& dataset, const std::filesystem::path& images,
               const std::filesystem::path& labels) {
  std::vector<std::uint8_t> ib;
  const bool gray = dataset.channels == 1;
  put_be32(ib, gray ? 0x00000803u : 0x00000804u);
  put_be32(ib, static_cast<std::uint32_t>(dataset.size()));
  if (!gray) put_be32(ib, static_cast<std::uint32_t>(dataset.channels));
  put_be32(ib, static_cast<std::uint32_t>(dataset.resolution));
  put_be32(ib, static_cast<std::uint32_t>(dataset.resolution));
  for (float v : dataset.pixels) {
    ib.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
  }
  std::vector<std::uint8_t> lb;
  put_be32(lb, 0x00000801u);
  put_be32(lb, static_cast<std::uint32_t>(dataset.size()));
  for (auto y : dataset.labels) lb.push_back(static_cast<std::uint8_t>(y));
  write_file(images, ib);
  write_file(labels, lb);
}

namespace {

double gaussian(CounterRng& rng) {
  // Box-Muller; 1 - u keeps the log argument in (0, 1].
  const double u1 = 1.0 - rng.uniform();
  const double u2 = rng.uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace

std::vector<float> synth_templates(std::size_t num_classes, std::size_t resolution,
                                   std::uint64_t seed, std::size_t channels) {
  const std::size_t plane = resolution * resolution;
  std::vector<float> out(num_classes * channels * plane);
  constexpr int kWaves = 3;
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t ch = 0; ch < channels; ++ch) {
      CounterRng rng(derive_seed(seed, "synth-template"), c, ch);
      const double base = 0.3 * (rng.uniform() - 0.5);
      struct Wave {
        double fx, fy, phase, amp;
      } waves[kWaves];
      for (auto& w : waves) {
        do {
          w.fx = static_cast<double>(rng.below(7)) - 3.0;
          w.fy = static_cast<double>(rng.below(7)) - 3.0;
        } while (w.fx == 0 && w.fy == 0);
        w.phase = 2.0 * std::numbers::pi * rng.uniform();
        w.amp = 0.5 + rng.uniform();
      }
      float* dst = out.data() + (c * channels + ch) * plane;
      for (std::size_t y = 0; y < resolution; ++y) {
        for (std::size_t x = 0; x < resolution; ++x) {
          double v = 0;
          for (const auto& w : waves) {
            v += w.amp * std::sin(2.0 * std::numbers::pi *
                                      (w.fx * static_cast<double>(x) + w.fy * static_cast<double>(y)) /
                                      static_cast<double>(resolution) +
                                  w.phase);
          }
          dst[y * resolution + x] = static_cast<float>(0.5 + base + 0.12 * v);
        }
      }
    }
  }
  return out;
}

Dataset synth_generate(std::size_t num_classes, std::size_t n_per_class, std::size_t resolution,
                       std::uint64_t seed, const SyntheticOptions& options) {
  if (num_classes < 2) throw DataError("synthetic data needs at least 2 classes");
  const auto templates = synth_templates(num_classes, resolution, seed, options.channels);
  Dataset ds;
  ds.channels = options.channels;
  ds.resolution = resolution;
  ds.num_classes = num_classes;
  const std::size_t isz = ds.image_size();
  const std::size_t n = num_classes * n_per_class;
  ds.pixels.resize(n * isz);
  ds.labels.resize(n);
  const std::uint64_t key = derive_seed(seed, "synth-sample") ^ splitmix64(options.sample_stream);
  for (std::size_t i = 0; i < n; ++i) {
    // Classes interleave so any prefix is close to balanced.
    const std::size_t cls = i % num_classes;
    CounterRng rng(key, i, 0);
    std::size_t other = static_cast<std::size_t>(rng.below(num_classes - 1));
    if (other >= cls) ++other;
    const double mix = options.max_mix * rng.uniform();
    const double contrast = 0.6 + 0.8 * rng.uniform();
    const double brightness = 0.2 * (rng.uniform() - 0.5);
    const float* own = templates.data() + cls * isz;
    const float* mate = templates.data() + other * isz;
    float* dst = ds.pixels.data() + i * isz;
    for (std::size_t k = 0; k < isz; ++k) {
      const double t = (1.0 - mix) * own[k] + mix * mate[k];
      const double v = 0.5 + contrast * (t - 0.5) + brightness + options.noise * gaussian(rng);
      dst[k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
    ds.labels[i] = static_cast<std::int32_t>(cls);
  }
  return ds;
}

Dataset subset_few_sample(const Dataset& dataset, double retain_fraction, std::uint64_t seed) {
  if (!(retain_fraction > 0.0 && retain_fraction <= 1.0)) {
    throw DataError("retain_fraction must be in (0, 1], got " + std::to_string(retain_fraction));
  }
  std::vector<std::vector<std::size_t>> by_class(dataset.num_classes);
  for (std::size_t i = 0; i < dataset.size(); ++i)
    by_class[static_cast<std::size_t>(dataset.labels[i])].push_back(i);
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    if (by_class[c].empty()) throw DataError("class " + std::to_string(c) + " has no samples");
  }
  if (retain_fraction == 1.0) return dataset;

  std::vector<std::size_t> keep;
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    auto pool = by_class[c];
    const std::size_t n = pool.size();
    const auto k = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(retain_fraction * static_cast<double>(n) + 1e-9)));
    CounterRng rng(derive_seed(seed, "subset"), c, 0);
    // Partial Fisher-Yates: the first k slots become a uniform sample.
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
      std::swap(pool[i], pool[j]);
    }
    keep.insert(keep.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
  }
  std::sort(keep.begin(), keep.end());
  return dataset.select(keep);
}

Dataset downsample(const Dataset& dataset, std::size_t target) {
  if (target == 0 || target > dataset.resolution) {
    throw DataError("downsample target " + std::to_string(target) + " must be in 1.." +
                    std::to_string(dataset.resolution));
  }
  if (target == dataset.resolution) return dataset;
  const std::size_t src = dataset.resolution;
  const double ratio = static_cast<double>(src) / static_cast<double>(target);

  struct Tap {
    std::size_t lo, hi;
    float frac;
  };
  std::vector<Tap> taps(target);
  for (std::size_t d = 0; d < target; ++d) {
    const double s = std::clamp((static_cast<double>(d) + 0.5) * ratio - 0.5, 0.0,
                                static_cast<double>(src - 1));
    const auto lo = static_cast<std::size_t>(std::floor(s));
    taps[d] = {lo, std::min(lo + 1, src - 1), static_cast<float>(s - static_cast<double>(lo))};
  }

  Dataset out;
  out.channels = dataset.channels;
  out.resolution = target;
  out.num_classes = dataset.num_classes;
  out.labels = dataset.labels;
  out.pixels.resize(dataset.size() * dataset.channels * target * target);
  const std::size_t planes = dataset.size() * dataset.channels;
  for (std::size_t p = 0; p < planes; ++p) {
    const float* in = dataset.pixels.data() + p * src * src;
    float* o = out.pixels.data() + p * target * target;
    for (std::size_t y = 0; y < target; ++y) {
      const Tap& ty = taps[y];
      for (std::size_t x = 0; x < target; ++x) {
        const Tap& tx = taps[x];
        // Lerp form keeps constant regions exactly constant.
        const float top = in[ty.lo * src + tx.lo] +
                          tx.frac * (in[ty.lo * src + tx.hi] - in[ty.lo * src + tx.lo]);
        const float bottom = in[ty.hi * src + tx.lo] +
                             tx.frac * (in[ty.hi * src + tx.hi] - in[ty.hi * src + tx.lo]);
        o[y * target + x] = top + ty.frac * (bottom - top);
      }
    }
  }
  return out;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    std::uint64_t seed, std::size_t epoch) {
  if (batch_size == 0) throw DataError("batch_size must be at least 1");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  CounterRng rng(derive_seed(seed, "shuffle"), epoch, 0);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(order[i - 1], order[j]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

std::vector<std::vector<std::size_t>> sequential_batches(std::size_t n, std::size_t batch_size) {
  if (batch_size == 0) throw DataError("batch_size must be at least 1");
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::vector<std::size_t> b;
    for (std::size_t i = start; i < std::min(n, start + batch_size); ++i) b.push_back(i);
    batches.push_back(std::move(b));
  }
  return batches;
}

LabeledBatch make_batch(const Dataset& dataset, std::span<const std::size_t> indices,
                        const Normalization& norm, const Augmentation& augmentation,
                        std::uint64_t aug_seed, std::size_t epoch) {
  if (norm.mean.size() != dataset.channels || norm.stddev.size() != dataset.channels) {
    throw DataError("normalization has " + std::to_string(norm.mean.size()) +
                    " channels, dataset has " + std::to_string(dataset.channels));
  }
  const std::size_t C = dataset.channels;
  const std::size_t R = dataset.resolution;
  const std::size_t isz = dataset.image_size();
  std::vector<float> values(indices.size() * isz);
  LabeledBatch batch;
  batch.indices.assign(indices.begin(), indices.end());
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const std::size_t idx = indices[b];
    batch.labels.push_back(dataset.labels[idx]);
    const float* src = dataset.pixels.data() + idx * isz;
    float* dst = values.data() + b * isz;

    std::ptrdiff_t shift_y = 0, shift_x = 0;
    bool flip = false;
    if (augmentation.enabled) {
      CounterRng rng(derive_seed(aug_seed, "augment"), epoch, idx);
      const auto pad = static_cast<std::ptrdiff_t>(augmentation.crop_padding);
      shift_y = static_cast<std::ptrdiff_t>(rng.below(2 * augmentation.crop_padding + 1)) - pad;
      shift_x = static_cast<std::ptrdiff_t>(rng.below(2 * augmentation.crop_padding + 1)) - pad;
      flip = augmentation.horizontal_flip && rng.uniform() < 0.5;
    }
    const auto Ri = static_cast<std::ptrdiff_t>(R);
    for (std::size_t c = 0; c < C; ++c) {
      const float mean = norm.mean[c];
      const float inv = 1.0f / norm.stddev[c];
      for (std::ptrdiff_t y = 0; y < Ri; ++y) {
        for (std::ptrdiff_t x = 0; x < Ri; ++x) {
          const std::ptrdiff_t sy = y + shift_y;
          const std::ptrdiff_t sx0 = x + shift_x;
          const std::ptrdiff_t sx = flip ? (Ri - 1 - sx0) : sx0;
          float raw = 0.0f;  // zero padding outside the source image
          if (sy >= 0 && sy < Ri && sx0 >= 0 && sx0 < Ri) {
            raw = src[c * R * R + static_cast<std::size_t>(sy * Ri + sx)];
          }
          dst[c * R * R + static_cast<std::size_t>(y * Ri + x)] = (raw - mean) * inv;
        }
      }
    }
  }
  batch.images = ad::Tensor<float>::from({indices.size(), C, R, R}, std::move(values));
  return batch;
}

std::vector<LabeledBatch> augment_and_batch(const Dataset& dataset, std::size_t batch_size,
                                            std::size_t epoch, std::uint64_t seed,
                                            const Normalization& norm,
                                            const Augmentation& augmentation) {
  std::vector<LabeledBatch> out;
  for (const auto& idx : epoch_batches(dataset.size(), batch_size, seed, epoch))
    out.push_back(make_batch(dataset, idx, norm, augmentation, seed, epoch));
  return out;
}

}  // namespace ekd::data
