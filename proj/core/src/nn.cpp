#include "ekd/nn.hpp"

#include <cmath>
#include <random>

#include "ekd/random.hpp"

namespace ekd::nn {

using ad::Shape;

LayerSpec LayerSpec::conv(std::size_t out_channels, std::size_t kernel, std::size_t stride,
                          std::size_t padding) {
  return {LayerKind::conv, out_channels, kernel, stride, padding};
}
LayerSpec LayerSpec::batch_norm() { return {LayerKind::batch_norm, 0, 0, 0, 0}; }
LayerSpec LayerSpec::relu() { return {LayerKind::relu, 0, 0, 0, 0}; }
LayerSpec LayerSpec::max_pool(std::size_t kernel, std::size_t stride) {
  return {LayerKind::max_pool, 0, kernel, stride, 0};
}

std::vector<BlockShape> validate(const BackboneSpec& spec) {
  if (spec.blocks.size() < 2) {
    throw SpecError("backbone needs at least 2 blocks to host a guided module, got " +
                    std::to_string(spec.blocks.size()));
  }
  if (spec.in_channels == 0 || spec.input_resolution == 0) {
    throw SpecError("input channels and resolution must be positive");
  }
  if (spec.num_classes < 2) throw SpecError("num_classes must be at least 2");

  std::vector<BlockShape> shapes;
  BlockShape cur{spec.in_channels, spec.input_resolution};
  for (std::size_t b = 0; b < spec.blocks.size(); ++b) {
    const auto& block = spec.blocks[b];
    if (block.layers.empty()) throw SpecError("block " + std::to_string(b) + " has no layers");
    for (std::size_t l = 0; l < block.layers.size(); ++l) {
      const LayerSpec& layer = block.layers[l];
      const std::string where = "block " + std::to_string(b) + " layer " + std::to_string(l);
      switch (layer.kind) {
        case LayerKind::conv:
          if (layer.out_channels == 0 || layer.kernel == 0 || layer.stride == 0) {
            throw SpecError(where + ": conv needs positive channels, kernel and stride");
          }
          if (cur.spatial + 2 * layer.padding < layer.kernel) {
            throw SpecError(where + ": kernel " + std::to_string(layer.kernel) +
                            " exceeds spatial size " + std::to_string(cur.spatial));
          }
          cur.spatial = ad::conv_output_size(cur.spatial, layer.kernel, layer.stride, layer.padding);
          cur.channels = layer.out_channels;
          break;
        case LayerKind::max_pool:
          if (layer.kernel == 0 || layer.stride == 0 || cur.spatial < layer.kernel ||
              (cur.spatial - layer.kernel) % layer.stride != 0) {
            throw SpecError(where + ": pooling window " + std::to_string(layer.kernel) + "/" +
                            std::to_string(layer.stride) + " does not tile spatial size " +
                            std::to_string(cur.spatial));
          }
          cur.spatial = ad::conv_output_size(cur.spatial, layer.kernel, layer.stride, 0);
          break;
        case LayerKind::batch_norm:
        case LayerKind::relu:
          break;
      }
    }
    shapes.push_back(cur);
  }
  if (spec.final_feature_dim != cur.channels) {
    throw SpecError("final_feature_dim " + std::to_string(spec.final_feature_dim) +
                    " differs from the last block's " + std::to_string(cur.channels) +
                    " channels");
  }
  return shapes;
}

namespace {

BlockSpec conv_block(std::initializer_list<std::size_t> widths, bool pool = true) {
  BlockSpec block;
  for (auto w : widths) {
    block.layers.push_back(LayerSpec::conv(w));
    block.layers.push_back(LayerSpec::batch_norm());
    block.layers.push_back(LayerSpec::relu());
  }
  if (pool) block.layers.push_back(LayerSpec::max_pool());
  return block;
}

}  // namespace

BackboneSpec toy_student_spec(std::size_t resolution, std::size_t num_classes,
                              std::size_t in_channels) {
  BackboneSpec spec;
  spec.in_channels = in_channels;
  spec.input_resolution = resolution;
  spec.blocks = {conv_block({8}), conv_block({16}), conv_block({32})};
  spec.final_feature_dim = 32;
  spec.num_classes = num_classes;
  return spec;
}

BackboneSpec toy_teacher_spec(std::size_t resolution, std::size_t num_classes,
                              std::size_t in_channels) {
  BackboneSpec spec;
  spec.in_channels = in_channels;
  spec.input_resolution = resolution;
  spec.blocks = {conv_block({16}), conv_block({32}), conv_block({32, 32})};
  spec.final_feature_dim = 32;
  spec.num_classes = num_classes;
  return spec;
}

BackboneSpec tiny_student_spec(std::size_t resolution, std::size_t num_classes,
                               std::size_t in_channels) {
  BackboneSpec spec;
  spec.in_channels = in_channels;
  spec.input_resolution = resolution;
  spec.blocks = {conv_block({4}), conv_block({6})};
  spec.final_feature_dim = 6;
  spec.num_classes = num_classes;
  return spec;
}

BackboneSpec tiny_teacher_spec(std::size_t resolution, std::size_t num_classes,
                               std::size_t in_channels) {
  BackboneSpec spec;
  spec.in_channels = in_channels;
  spec.input_resolution = resolution;
  spec.blocks = {conv_block({6}), conv_block({6, 6})};
  spec.final_feature_dim = 6;
  spec.num_classes = num_classes;
  return spec;
}

BackboneSpec preset_spec(const std::string& name, std::size_t resolution, std::size_t num_classes,
                         std::size_t in_channels) {
  if (name == "toy_student") return toy_student_spec(resolution, num_classes, in_channels);
  if (name == "toy_teacher") return toy_teacher_spec(resolution, num_classes, in_channels);
  if (name == "tiny_student") return tiny_student_spec(resolution, num_classes, in_channels);
  if (name == "tiny_teacher") return tiny_teacher_spec(resolution, num_classes, in_channels);
  throw SpecError("unknown backbone preset '" + name + "'");
}

namespace {

template <typename T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<T> values(ad::shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>::from(std::move(shape), std::move(values), true);
}

template <typename T>
Conv2d<T> make_conv(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                    std::size_t padding, std::mt19937_64& rng) {
  return {he_normal<T>({out, in, kernel, kernel}, in * kernel * kernel, rng), {stride, padding}};
}

template <typename T>
BatchNorm2d<T> make_bn(std::size_t channels) {
  return {Tensor<T>::full({channels}, T(1), true), Tensor<T>::zeros({channels}, true),
          {Tensor<T>::zeros({channels}), Tensor<T>::full({channels}, T(1))}};
}

template <typename T>
Linear<T> make_linear(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  return {he_normal<T>({in, out}, in, rng), Tensor<T>::zeros({out}, true)};
}

template <typename T>
Tensor<T> deep(const Tensor<T>& t) {
  return t.clone();
}

template <typename T>
Layer<T> clone_layer(const Layer<T>& layer) {
  return std::visit(
      [](const auto& l) -> Layer<T> {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, Conv2d<T>>) {
          return Conv2d<T>{deep(l.weight), l.options};
        } else if constexpr (std::is_same_v<L, BatchNorm2d<T>>) {
          return BatchNorm2d<T>{deep(l.scale), deep(l.shift),
                                {deep(l.stats.running_mean), deep(l.stats.running_var)}};
        } else {
          return l;
        }
      },
      layer);
}

template <typename T>
void require_input(const Tensor<T>& x, std::size_t channels, std::size_t spatial,
                   const std::string& where) {
  if (x.rank() != 4 || x.dim(1) != channels || x.dim(2) != spatial || x.dim(3) != spatial) {
    throw AttachmentError(where + ": expected [batch, " + std::to_string(channels) + ", " +
                          std::to_string(spatial) + ", " + std::to_string(spatial) + "], got " +
                          ad::shape_str(x.shape()));
  }
}

}  // namespace

template <typename T>
Tensor<T> Linear<T>::forward(const Tensor<T>& x) const {
  return ad::bias_add(ad::matmul(x, weight), bias);
}

template <typename T>
Tensor<T> Sequential<T>::forward(const Tensor<T>& x, ForwardMode mode) {
  Tensor<T> h = x;
  for (auto& layer : layers_) {
    h = std::visit(
        [&](auto& l) -> Tensor<T> {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, Conv2d<T>>) {
            return ad::conv2d(h, l.weight, l.options);
          } else if constexpr (std::is_same_v<L, BatchNorm2d<T>>) {
            ad::BatchNormOptions opts;
            opts.training = mode.training;
            opts.update_stats = mode.update_stats;
            return ad::batch_norm2d(h, l.scale, l.shift, l.stats, opts);
          } else if constexpr (std::is_same_v<L, Relu>) {
            return ad::relu(h);
          } else {
            return ad::max_pool2d(h, l.kernel, l.stride);
          }
        },
        layer);
  }
  return h;
}

template <typename T>
void Sequential<T>::collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string base = prefix + "layer" + std::to_string(i) + ".";
    if (const auto* conv = std::get_if<Conv2d<T>>(&layers_[i])) {
      out.push_back({base + "weight", conv->weight, TensorRole::weight});
    } else if (const auto* bn = std::get_if<BatchNorm2d<T>>(&layers_[i])) {
      out.push_back({base + "scale", bn->scale, TensorRole::norm});
      out.push_back({base + "shift", bn->shift, TensorRole::norm});
      out.push_back({base + "running_mean", bn->stats.running_mean, TensorRole::buffer});
      out.push_back({base + "running_var", bn->stats.running_var, TensorRole::buffer});
    }
  }
}

template <typename T>
Sequential<T> Sequential<T>::clone() const {
  Sequential copy;
  for (const auto& layer : layers_) copy.push(clone_layer<T>(layer));
  return copy;
}

template <typename T>
Backbone<T> Backbone<T>::build(const BackboneSpec& spec, std::uint64_t seed) {
  Backbone bb;
  bb.spec_ = spec;
  bb.shapes_ = validate(spec);
  std::mt19937_64 rng(derive_seed(seed, "backbone"));
  std::size_t channels = spec.in_channels;
  for (const auto& block : spec.blocks) {
    Sequential<T> seq;
    for (const auto& layer : block.layers) {
      switch (layer.kind) {
        case LayerKind::conv:
          seq.push(make_conv<T>(channels, layer.out_channels, layer.kernel, layer.stride,
                                layer.padding, rng));
          channels = layer.out_channels;
          break;
        case LayerKind::batch_norm:
          seq.push(make_bn<T>(channels));
          break;
        case LayerKind::relu:
          seq.push(Relu{});
          break;
        case LayerKind::max_pool:
          seq.push(MaxPool2d{layer.kernel, layer.stride});
          break;
      }
    }
    bb.blocks_.push_back(std::move(seq));
  }
  bb.fc_ = make_linear<T>(spec.final_feature_dim, spec.num_classes, rng);
  return bb;
}

template <typename T>
BackboneOutput<T> Backbone<T>::forward(const Tensor<T>& x, ForwardMode mode) {
  require_input(x, spec_.in_channels, spec_.input_resolution, "backbone input");
  BackboneOutput<T> out;
  Tensor<T> h = x;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    h = blocks_[b].forward(h, mode);
    if (b + 1 < blocks_.size()) out.block_features.push_back(h);
  }
  out.feature = ad::global_avg_pool2d(h);
  out.logits = fc_.forward(out.feature);
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> Backbone<T>::named_tensors() const {
  std::vector<NamedTensor<T>> out;
  for (std::size_t b = 0; b < blocks_.size(); ++b)
    blocks_[b].collect("block" + std::to_string(b) + ".", out);
  out.push_back({"fc.weight", fc_.weight, TensorRole::weight});
  out.push_back({"fc.bias", fc_.bias, TensorRole::weight});
  return out;
}

template <typename T>
std::size_t Backbone<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : named_tensors())
    if (t.role != TensorRole::buffer) n += t.tensor.numel();
  return n;
}

template <typename T>
Backbone<T> Backbone<T>::clone() const {
  Backbone copy;
  copy.spec_ = spec_;
  copy.shapes_ = shapes_;
  for (const auto& block : blocks_) copy.blocks_.push_back(block.clone());
  copy.fc_ = {fc_.weight.clone(), fc_.bias.clone()};
  return copy;
}

std::size_t default_reduce_channels(std::size_t in_channels) {
  return std::max<std::size_t>(4, in_channels / 2);
}

std::size_t guided_stage_count(const GuidedModuleSpec& spec) {
  if (spec.in_spatial == 0 || spec.target_spatial == 0) {
    throw SpecError("guided module: spatial sizes must be positive");
  }
  std::size_t s = spec.in_spatial;
  std::size_t stages = 0;
  while (s > spec.target_spatial) {
    s = ad::conv_output_size(s, 3, 2, 1);
    ++stages;
  }
  if (s != spec.target_spatial) {
    throw SpecError("guided module: stride-2 stages from " + std::to_string(spec.in_spatial) +
                    " cannot reach " + std::to_string(spec.target_spatial));
  }
  return stages;
}

template <typename T>
GuidedModule<T> GuidedModule<T>::build(const GuidedModuleSpec& spec, std::uint64_t seed) {
  if (spec.in_channels == 0 || spec.out_feature_dim == 0 || spec.num_classes < 2) {
    throw SpecError("guided module: channels, feature dim and classes must be positive");
  }
  GuidedModule gm;
  gm.spec_ = spec;
  if (gm.spec_.reduce_channels == 0) gm.spec_.reduce_channels = default_reduce_channels(spec.in_channels);
  const std::size_t mid = gm.spec_.reduce_channels;
  const std::size_t stages = guided_stage_count(spec);

  std::mt19937_64 rng(derive_seed(seed, "guided"));
  gm.body_.push(make_conv<T>(spec.in_channels, mid, 1, 1, 0, rng));
  gm.body_.push(make_bn<T>(mid));
  gm.body_.push(Relu{});
  for (std::size_t i = 0; i < stages; ++i) {
    gm.body_.push(make_conv<T>(mid, mid, 3, 2, 1, rng));
    gm.body_.push(make_bn<T>(mid));
    gm.body_.push(Relu{});
  }
  gm.body_.push(make_conv<T>(mid, spec.out_feature_dim, 1, 1, 0, rng));
  gm.fc_ = make_linear<T>(spec.out_feature_dim, spec.num_classes, rng);
  return gm;
}

template <typename T>
GuidedOutput<T> GuidedModule<T>::forward(const Tensor<T>& block_feature, ForwardMode mode) {
  require_input(block_feature, spec_.in_channels, spec_.in_spatial, "guided module input");
  GuidedOutput<T> out;
  out.feature = ad::global_avg_pool2d(body_.forward(block_feature, mode));
  out.logits = fc_.forward(out.feature);
  return out;
}

template <typename T>
std::vector<NamedTensor<T>> GuidedModule<T>::named_tensors() const {
  std::vector<NamedTensor<T>> out;
  body_.collect("", out);
  out.push_back({"fc.weight", fc_.weight, TensorRole::weight});
  out.push_back({"fc.bias", fc_.bias, TensorRole::weight});
  return out;
}

template <typename T>
GuidedModule<T> GuidedModule<T>::clone() const {
  GuidedModule copy;
  copy.spec_ = spec_;
  copy.body_ = body_.clone();
  copy.fc_ = {fc_.weight.clone(), fc_.bias.clone()};
  return copy;
}

template <typename T>
BlockOutputs<T> BlockOutputs<T>::backbone_only() const {
  BlockOutputs copy;
  copy.block_features = block_features;
  copy.backbone_feature = backbone_feature;
  copy.backbone_logits = backbone_logits;
  return copy;
}

StreamSpec full_stream_spec(const BackboneSpec& backbone) {
  StreamSpec spec;
  spec.backbone = backbone;
  spec.guided_pairs = backbone.blocks.empty() ? 0 : backbone.blocks.size() - 1;
  return spec;
}

std::vector<std::size_t> guided_attachment_blocks(std::size_t num_blocks, std::size_t pairs) {
  if (num_blocks < 2 || pairs > num_blocks - 1) {
    throw SpecError("guided pairs must be in 0.." + std::to_string(num_blocks ? num_blocks - 1 : 0) +
                    ", got " + std::to_string(pairs));
  }
  std::vector<std::size_t> blocks;
  for (std::size_t b = num_blocks - pairs; b < num_blocks; ++b) blocks.push_back(b);
  return blocks;
}

template <typename T>
Stream<T> Stream<T>::build(const StreamSpec& spec, std::uint64_t seed) {
  Stream s;
  s.spec_ = spec;
  s.backbone_ = Backbone<T>::build(spec.backbone, seed);
  s.guided_blocks_ = guided_attachment_blocks(spec.backbone.blocks.size(), spec.guided_pairs);
  const auto& shapes = s.backbone_.block_shapes();
  for (std::size_t b : s.guided_blocks_) {
    GuidedModuleSpec g;
    g.in_channels = shapes[b - 1].channels;
    g.in_spatial = shapes[b - 1].spatial;
    g.target_spatial = shapes.back().spatial;
    g.reduce_channels = spec.reduce_channels;
    g.out_feature_dim = spec.backbone.final_feature_dim;
    g.num_classes = spec.backbone.num_classes;
    s.guided_.push_back(GuidedModule<T>::build(g, splitmix64(seed + b)));
  }
  return s;
}

template <typename T>
BlockOutputs<T> forward_collect(Backbone<T>& backbone, std::vector<GuidedModule<T>>& guided,
                                const std::vector<std::size_t>& guided_blocks,
                                const Tensor<T>& x, ForwardMode mode) {
  if (guided.size() != guided_blocks.size()) {
    throw ad::ContractError("forward_collect: " + std::to_string(guided.size()) +
                            " guided modules for " + std::to_string(guided_blocks.size()) +
                            " attachment points");
  }
  auto bb = backbone.forward(x, mode);
  BlockOutputs<T> out;
  out.block_features = bb.block_features;
  out.backbone_feature = bb.feature;
  out.backbone_logits = bb.logits;
  out.guided_blocks = guided_blocks;
  for (std::size_t i = 0; i < guided.size(); ++i) {
    const std::size_t b = guided_blocks[i];
    if (b == 0 || b > out.block_features.size()) {
      throw AttachmentError("guided module attached at block " + std::to_string(b) +
                            " but the backbone exposes blocks 1.." +
                            std::to_string(out.block_features.size()));
    }
    GuidedOutput<T> g;
    try {
      g = guided[i].forward(out.block_features[b - 1], mode);
    } catch (const AttachmentError& e) {
      throw AttachmentError("block " + std::to_string(b) + ": " + e.what());
    }
    out.guided_features.push_back(g.feature);
    out.guided_logits.push_back(g.logits);
  }
  return out;
}

template <typename T>
BlockOutputs<T> Stream<T>::forward_collect(const Tensor<T>& x, ForwardMode mode) {
  return nn::forward_collect(backbone_, guided_, guided_blocks_, x, mode);
}

template <typename T>
std::vector<NamedTensor<T>> Stream<T>::named_tensors() const {
  std::vector<NamedTensor<T>> out;
  for (auto& t : backbone_.named_tensors()) {
    t.name = "backbone." + t.name;
    out.push_back(std::move(t));
  }
  for (std::size_t i = 0; i < guided_.size(); ++i) {
    for (auto& t : guided_[i].named_tensors()) {
      t.name = "guided" + std::to_string(guided_blocks_[i]) + "." + t.name;
      out.push_back(std::move(t));
    }
  }
  return out;
}

template <typename T>
std::size_t Stream<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : named_tensors())
    if (t.role != TensorRole::buffer) n += t.tensor.numel();
  return n;
}

template <typename T>
std::vector<NamedTensor<T>> trainable(const std::vector<NamedTensor<T>>& tensors) {
  std::vector<NamedTensor<T>> out;
  for (const auto& t : tensors)
    if (t.role != TensorRole::buffer) out.push_back(t);
  return out;
}

#define EKD_INSTANTIATE_NN(T)                                                                 \
  template struct Linear<T>;                                                                  \
  template class Sequential<T>;                                                               \
  template class Backbone<T>;                                                                 \
  template class GuidedModule<T>;                                                             \
  template struct BlockOutputs<T>;                                                            \
  template class Stream<T>;                                                                   \
  template BlockOutputs<T> forward_collect(Backbone<T>&, std::vector<GuidedModule<T>>&,       \
                                           const std::vector<std::size_t>&, const Tensor<T>&, \
                                           ForwardMode);                                      \
  template std::vector<NamedTensor<T>> trainable(const std::vector<NamedTensor<T>>&);

EKD_INSTANTIATE_NN(float)
EKD_INSTANTIATE_NN(double)

#undef EKD_INSTANTIATE_NN

}  // namespace ekd::nn
