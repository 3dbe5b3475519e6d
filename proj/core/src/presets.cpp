#include "ekd/presets.hpp"

#include <algorithm>
#include <cmath>

namespace ekd::presets {

std::vector<std::size_t> scaled_decay_epochs(std::size_t epochs) {
  std::vector<std::size_t> out;
  for (double f : {75.0 / 200.0, 130.0 / 200.0, 180.0 / 200.0}) {
    auto e = static_cast<std::size_t>(std::floor(f * static_cast<double>(epochs) + 0.5));
    if (!out.empty() && e <= out.back()) e = out.back() + 1;
    out.push_back(std::max<std::size_t>(e, 1));
  }
  return out;
}

train::TrainConfig desk_train_config(std::size_t epochs) {
  train::TrainConfig c;
  c.total_epochs = epochs;
  c.lr_decay_epochs = scaled_decay_epochs(epochs);
  // At T = 4 the T^2-scaled KL terms and the squared feature distances of the
  // toy networks are one to two orders of magnitude above the CE terms.
  c.loss_weights.distill = 0.1;
  c.loss_weights.guided_kl = 0.1;
  c.loss_weights.feature = 0.01;
  c.loss_weights.guided_feature = 0.01;
  return c;
}

data::SyntheticOptions desk_synthetic(std::uint64_t sample_stream) {
  data::SyntheticOptions o;
  o.noise = 0.6;
  o.max_mix = 0.45;
  o.sample_stream = sample_stream;
  return o;
}

data::Augmentation desk_augmentation() {
  // The synthetic class patterns are not mirror-symmetric; flipping would
  // double the number of patterns per class.
  return data::Augmentation{true, 4, false};
}

DeskData desk_data(std::size_t train_per_class, std::size_t test_per_class,
                   std::size_t resolution, std::uint64_t seed) {
  DeskData d;
  d.train = data::synth_generate(10, train_per_class, resolution, seed, desk_synthetic(0));
  d.test = data::synth_generate(10, test_per_class, resolution, seed, desk_synthetic(1));
  d.norm = data::compute_normalization(d.train);
  return d;
}

}  // namespace ekd::presets
