#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "ekd/data.hpp"
#include "ekd/trainer.hpp"

namespace ekd::presets {

/// The 75/130/180-of-200 decay points scaled to a shorter budget.
std::vector<std::size_t> scaled_decay_epochs(std::size_t epochs);

/// Desk-scale run: toy networks, 30 epochs, down-weighted distillation terms.
train::TrainConfig desk_train_config(std::size_t epochs = 30);

data::SyntheticOptions desk_synthetic(std::uint64_t sample_stream = 0);
/// Pad-and-crop only.
data::Augmentation desk_augmentation();

struct DeskData {
  data::Dataset train;
  data::Dataset test;
  data::Normalization norm;  // computed on `train`
};

/// Synthetic 10-class train/test pair drawn from the same class patterns.
DeskData desk_data(std::size_t train_per_class = 200, std::size_t test_per_class = 50,
                   std::size_t resolution = 32, std::uint64_t seed = 11);

}  // namespace ekd::presets
