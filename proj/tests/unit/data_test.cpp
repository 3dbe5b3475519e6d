#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "ekd/data.hpp"
#include "ekd/random.hpp"

using namespace ekd;
using namespace ekd::data;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("ekd_data_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::vector<std::uint8_t> cifar_bytes(std::size_t records, CifarVariant v, std::uint8_t label) {
  std::vector<std::uint8_t> out;
  for (std::size_t r = 0; r < records; ++r) {
    if (v == CifarVariant::cifar100) out.push_back(static_cast<std::uint8_t>(r % 20));
    out.push_back(label);
    for (std::size_t k = 0; k < kCifarImageBytes; ++k) out.push_back(static_cast<std::uint8_t>((k + r) % 256));
  }
  return out;
}

Dataset constant_dataset(std::size_t n, std::size_t res, float value) {
  Dataset d;
  d.num_classes = 2;
  d.resolution = res;
  d.pixels.assign(n * 3 * res * res, value);
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(static_cast<std::int32_t>(i % 2));
  return d;
}

}  // namespace

TEST(Cifar, RecordSizes) {
  EXPECT_EQ(cifar_record_size(CifarVariant::cifar10), 3073u);
  EXPECT_EQ(cifar_record_size(CifarVariant::cifar100), 3074u);
}

TEST(Cifar, ParsesRecordsAndScalesPixels) {
  const auto bytes = cifar_bytes(5, CifarVariant::cifar10, 7);
  const auto d = parse_cifar_binary(bytes, CifarVariant::cifar10, 10);
  ASSERT_EQ(d.size(), 5u);
  EXPECT_EQ(d.labels[3], 7);
  EXPECT_EQ(d.pixels[0], 0.f);
  EXPECT_FLOAT_EQ(d.pixels[255], 1.f);
  EXPECT_FLOAT_EQ(d.image(1)[0], 1.f / 255.f);
}

TEST(Cifar, HundredUsesFineLabel) {
  const auto bytes = cifar_bytes(3, CifarVariant::cifar100, 42);
  const auto d = parse_cifar_binary(bytes, CifarVariant::cifar100, 100);
  for (auto y : d.labels) EXPECT_EQ(y, 42);
}

TEST(Cifar, RejectsTruncatedFileAndBadLabel) {
  auto bytes = cifar_bytes(2, CifarVariant::cifar10, 1);
  bytes.pop_back();
  EXPECT_THROW(parse_cifar_binary(bytes, CifarVariant::cifar10, 10), DataError);
  const auto bad = cifar_bytes(1, CifarVariant::cifar10, 10);
  EXPECT_THROW(parse_cifar_binary(bad, CifarVariant::cifar10, 10), DataError);
}

TEST(Cifar, LoadsFromFile) {
  const auto dir = temp_dir("cifar");
  const auto bytes = cifar_bytes(4, CifarVariant::cifar10, 3);
  std::ofstream(dir / "b.bin", std::ios::binary)
      .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  EXPECT_EQ(load_cifar_binary(dir / "b.bin", CifarVariant::cifar10, 10).size(), 4u);
  EXPECT_THROW(load_cifar_binary(dir / "missing.bin", CifarVariant::cifar10, 10), DataError);
}

TEST(Idx, RoundTripBothMagics) {
  const auto dir = temp_dir("idx");
  for (std::size_t channels : {1u, 3u}) {
    SyntheticOptions o;
    o.channels = channels;
    auto d = synth_generate(3, 4, 8, 1, o);
    write_idx(d, dir / "img", dir / "lbl");
    std::ifstream in(dir / "img", std::ios::binary);
    unsigned char magic[4];
    in.read(reinterpret_cast<char*>(magic), 4);
    EXPECT_EQ(magic[2], 0x08);
    EXPECT_EQ(magic[3], channels == 1 ? 0x03 : 0x04);
    auto back = load_idx(dir / "img", dir / "lbl", 3);
    EXPECT_EQ(back.labels, d.labels);
    EXPECT_EQ(back.channels, channels);
    for (std::size_t i = 0; i < d.pixels.size(); ++i) {
      EXPECT_NEAR(back.pixels[i], d.pixels[i], 0.5f / 255.f + 1e-6f);
    }
  }
}

TEST(Synthetic, BalancedAndDeterministic) {
  auto a = synth_generate(10, 200, 32, 11);
  auto b = synth_generate(10, 200, 32, 11);
  EXPECT_EQ(a.size(), 2000u);
  for (auto c : a.class_counts()) EXPECT_EQ(c, 200u);
  EXPECT_EQ(a.pixels, b.pixels);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_THROW(synth_generate(1, 10, 8, 1), DataError);
}

TEST(Synthetic, NearestTemplateSeparatesClasses) {
  const std::size_t m = 10, res = 32;
  const auto d = synth_generate(m, 50, res, 11);
  const auto templates = synth_templates(m, res, 11);
  const std::size_t sz = d.image_size();
  // Correlation after removing each image's mean, so contrast and brightness do not matter.
  auto centered = [&](const float* p) {
    std::vector<double> v(p, p + sz);
    const double mu = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(sz);
    double nrm = 0;
    for (auto& x : v) {
      x -= mu;
      nrm += x * x;
    }
    nrm = std::sqrt(nrm);
    for (auto& x : v) x /= nrm;
    return v;
  };
  std::vector<std::vector<double>> t;
  for (std::size_t c = 0; c < m; ++c) t.push_back(centered(templates.data() + c * sz));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto x = centered(d.pixels.data() + i * sz);
    std::size_t best = 0;
    double best_score = -2;
    for (std::size_t c = 0; c < m; ++c) {
      const double s = std::inner_product(x.begin(), x.end(), t[c].begin(), 0.0);
      if (s > best_score) {
        best_score = s;
        best = c;
      }
    }
    correct += best == static_cast<std::size_t>(d.labels[i]);
  }
  EXPECT_GT(static_cast<double>(correct) / static_cast<double>(d.size()), 0.9);
}

TEST(Subset, QuarterKeepsQuarterPerClass) {
  Dataset d = synth_generate(4, 100, 8, 2);
  auto s = subset_few_sample(d, 0.25, 9);
  for (auto c : s.class_counts()) EXPECT_EQ(c, 25u);
  auto tiny = subset_few_sample(synth_generate(3, 2, 8, 2), 0.1, 9);
  for (auto c : tiny.class_counts()) EXPECT_EQ(c, 1u);
  EXPECT_THROW(subset_few_sample(d, 0.0, 1), DataError);
  EXPECT_THROW(subset_few_sample(d, 1.5, 1), DataError);
}

TEST(Subset, FullFractionIsIdentity) {
  Dataset d = synth_generate(3, 10, 8, 2);
  auto s = subset_few_sample(d, 1.0, 5);
  EXPECT_EQ(s.pixels, d.pixels);
  EXPECT_EQ(s.labels, d.labels);
}

TEST(Subset, OverlapBetweenSeedsNearFractionSquared) {
  // Tag each sample by a unique pixel value to recover identities.
  const std::size_t per_class = 40, classes = 2;
  Dataset d;
  d.num_classes = classes;
  d.channels = 1;
  d.resolution = 1;
  for (std::size_t i = 0; i < per_class * classes; ++i) {
    d.pixels.push_back(static_cast<float>(i));
    d.labels.push_back(static_cast<std::int32_t>(i % classes));
  }
  const double f = 0.5;
  const std::size_t draws = 100;
  double total = 0, total_sq = 0;
  for (std::size_t k = 0; k < draws; ++k) {
    auto a = subset_few_sample(d, f, 2 * k + 1);
    auto b = subset_few_sample(d, f, 2 * k + 2);
    std::set<float> sa(a.pixels.begin(), a.pixels.end());
    std::size_t common = 0;
    for (float p : b.pixels) common += sa.count(p);
    const double frac = static_cast<double>(common) / static_cast<double>(per_class * classes);
    total += frac;
    total_sq += frac * frac;
  }
  const double mean = total / draws;
  const double sd = std::sqrt(std::max(total_sq / draws - mean * mean, 1e-12));
  EXPECT_NEAR(mean, f * f, 3 * sd / std::sqrt(static_cast<double>(draws)) + 1e-3);
}

TEST(Downsample, ConstantStaysConstant) {
  auto d = constant_dataset(2, 32, 0.3125f);
  auto s = downsample(d, 16);
  EXPECT_EQ(s.resolution, 16u);
  for (float p : s.pixels) EXPECT_EQ(p, 0.3125f);
  EXPECT_EQ(downsample(d, 32).pixels, d.pixels);
  EXPECT_THROW(downsample(d, 64), DataError);
}

TEST(Downsample, CheckerboardAveragesQuads) {
  Dataset d;
  d.channels = 1;
  d.resolution = 4;
  d.num_classes = 2;
  // Half-pixel-centred 4 -> 2 samples exactly between each 2x2 quad.
  d.pixels = {0, 1, 0, 1,  //
              1, 0, 1, 0,  //
              0, 1, 0, 1,  //
              1, 0, 1, 0};
  d.pixels[0] = 4;  // break the symmetry of the top-left quad
  d.labels = {0};
  auto s = downsample(d, 2);
  EXPECT_FLOAT_EQ(s.pixels[0], (4 + 1 + 1 + 0) / 4.f);
  EXPECT_FLOAT_EQ(s.pixels[1], 0.5f);
  EXPECT_FLOAT_EQ(s.pixels[3], 0.5f);
}

TEST(Batching, PartitionKeepsLastPartial) {
  auto batches = epoch_batches(10, 4, 1, 0);
  ASSERT_EQ(batches.size(), 3u);
  EXPECT_EQ(batches[0].size(), 4u);
  EXPECT_EQ(batches[2].size(), 2u);
  std::set<std::size_t> seen;
  for (const auto& b : batches) seen.insert(b.begin(), b.end());
  EXPECT_EQ(seen.size(), 10u);
  EXPECT_EQ(epoch_batches(10, 4, 1, 0), batches);
  EXPECT_NE(epoch_batches(10, 4, 1, 1), batches);
  EXPECT_THROW(epoch_batches(10, 0, 1, 0), DataError);
}

TEST(Batching, AugmentationOffIsNormalizedOriginal) {
  auto d = synth_generate(2, 3, 8, 4);
  auto norm = compute_normalization(d);
  const Augmentation off{false, 4, true};
  std::vector<std::size_t> idx{2, 0};
  auto b = make_batch(d, idx, norm, off, 1, 0);
  const std::size_t plane = 64;
  for (std::size_t k = 0; k < d.image_size(); ++k) {
    const std::size_t c = k / plane;
    EXPECT_FLOAT_EQ(b.images.at(k), (d.image(2)[k] - norm.mean[c]) / norm.stddev[c]);
  }
  EXPECT_EQ(b.labels, (std::vector<std::int32_t>{d.labels[2], d.labels[0]}));
}

TEST(Batching, AugmentationDependsOnlyOnSeedEpochIndex) {
  auto d = synth_generate(3, 8, 16, 4);
  auto norm = compute_normalization(d);
  const Augmentation on{};
  std::vector<std::size_t> a{5, 1, 7}, b{7, 3, 5};
  auto ba = make_batch(d, a, norm, on, 9, 2);
  auto bb = make_batch(d, b, norm, on, 9, 2);
  const std::size_t sz = d.image_size();
  // Sample 5 and sample 7 are transformed identically regardless of batch position.
  for (std::size_t k = 0; k < sz; ++k) {
    EXPECT_EQ(ba.images.at(k), bb.images.at(2 * sz + k));
    EXPECT_EQ(ba.images.at(2 * sz + k), bb.images.at(k));
  }
  auto again = augment_and_batch(d, 5, 3, 9, norm, on);
  auto twice = augment_and_batch(d, 5, 3, 9, norm, on);
  ASSERT_EQ(again.size(), twice.size());
  for (std::size_t i = 0; i < again.size(); ++i) {
    EXPECT_EQ(again[i].indices, twice[i].indices);
    EXPECT_TRUE(std::equal(again[i].images.data().begin(), again[i].images.data().end(),
                           twice[i].images.data().begin()));
  }
}

TEST(Batching, NormalizedStatisticsMatch) {
  auto d = synth_generate(10, 50, 16, 6);
  auto norm = compute_normalization(d);
  auto batches = augment_and_batch(d, 500, 0, 1, norm, Augmentation{false, 0, false});
  const std::size_t plane = 256;
  for (std::size_t c = 0; c < 3; ++c) {
    double s = 0, sq = 0, n = 0;
    for (const auto& b : batches) {
      for (std::size_t i = 0; i < b.size(); ++i) {
        for (std::size_t k = 0; k < plane; ++k) {
          const double x = b.images.at((i * 3 + c) * plane + k);
          s += x;
          sq += x * x;
          n += 1;
        }
      }
    }
    EXPECT_NEAR(s / n, 0.0, 0.05);
    EXPECT_NEAR(std::sqrt(sq / n - (s / n) * (s / n)), 1.0, 0.05);
  }
}

TEST(Prefetcher, OutputIndependentOfWorkers) {
  auto make = [](std::size_t i) { return splitmix64(i); };
  std::vector<std::uint64_t> serial, parallel;
  OrderedPrefetcher<std::uint64_t> a(50, 1, make), b(50, 8, make);
  while (auto x = a.next()) serial.push_back(*x);
  while (auto x = b.next()) parallel.push_back(*x);
  EXPECT_EQ(serial, parallel);
  EXPECT_EQ(serial.size(), 50u);
}
