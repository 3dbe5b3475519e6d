#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "ekd/ops.hpp"
#include "ekd/tensor.hpp"

namespace ekd::nn {

using ad::Tensor;

/// An architecture description that cannot be instantiated.
class SpecError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A tensor reaching a module does not have the shape the module was built for.
class AttachmentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class LayerKind { conv, batch_norm, relu, max_pool };

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  std::size_t out_channels = 0;  // conv only
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;

  static LayerSpec conv(std::size_t out_channels, std::size_t kernel = 3, std::size_t stride = 1,
                        std::size_t padding = 1);
  static LayerSpec batch_norm();
  static LayerSpec relu();
  static LayerSpec max_pool(std::size_t kernel = 2, std::size_t stride = 2);
};

struct BlockSpec {
  std::vector<LayerSpec> layers;
};

struct BackboneSpec {
  std::size_t in_channels = 3;
  std::size_t input_resolution = 32;
  std::vector<BlockSpec> blocks;
  // Width of the pooled pre-classifier feature; equals the last block's channels.
  std::size_t final_feature_dim = 0;
  std::size_t num_classes = 0;
};

/// Channels and (square) spatial size of a tensor at a block boundary.
struct BlockShape {
  std::size_t channels = 0;
  std::size_t spatial = 0;
};

/// Checks a backbone description and returns the output shape of every block.
std::vector<BlockShape> validate(const BackboneSpec& spec);

/// Three conv-bn-relu-pool blocks of widths 8, 16, 32 (the student preset).
BackboneSpec toy_student_spec(std::size_t resolution = 32, std::size_t num_classes = 10,
                              std::size_t in_channels = 3);
/// Wider three-block preset ending in the same 32-channel feature.
BackboneSpec toy_teacher_spec(std::size_t resolution = 32, std::size_t num_classes = 10,
                              std::size_t in_channels = 3);
/// Two small blocks, for 8x8 inputs in gradient checks.
BackboneSpec tiny_student_spec(std::size_t resolution = 8, std::size_t num_classes = 3,
                               std::size_t in_channels = 3);
BackboneSpec tiny_teacher_spec(std::size_t resolution = 8, std::size_t num_classes = 3,
                               std::size_t in_channels = 3);
/// Looks up one of "toy_student", "toy_teacher", "tiny_student", "tiny_teacher".
BackboneSpec preset_spec(const std::string& name, std::size_t resolution, std::size_t num_classes,
                         std::size_t in_channels = 3);

struct ForwardMode {
  bool training = true;
  // Training mode only: whether batch-norm running statistics absorb the batch.
  bool update_stats = true;

  static constexpr ForwardMode train() { return {true, true}; }
  static constexpr ForwardMode train_frozen_stats() { return {true, false}; }
  static constexpr ForwardMode eval() { return {false, false}; }
};

/// How the optimizer treats a named tensor.
enum class TensorRole {
  weight,  // trained, weight-decayed
  norm,    // trained, never decayed (batch-norm scale/shift)
  buffer,  // not trained (running statistics)
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  TensorRole role = TensorRole::weight;
};

template <typename T>
struct Conv2d {
  Tensor<T> weight;
  ad::Conv2dOptions options;
};

template <typename T>
struct BatchNorm2d {
  Tensor<T> scale;
  Tensor<T> shift;
  ad::BatchNormStats<T> stats;
};

struct Relu {};

struct MaxPool2d {
  std::size_t kernel = 2;
  std::size_t stride = 2;
};

template <typename T>
using Layer = std::variant<Conv2d<T>, BatchNorm2d<T>, Relu, MaxPool2d>;

template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]

  Tensor<T> forward(const Tensor<T>& x) const;
};

template <typename T>
class Sequential {
 public:
  void push(Layer<T> layer) { layers_.push_back(std::move(layer)); }
  Tensor<T> forward(const Tensor<T>& x, ForwardMode mode);
  void collect(const std::string& prefix, std::vector<NamedTensor<T>>& out) const;
  Sequential clone() const;
  std::size_t size() const { return layers_.size(); }

 private:
  std::vector<Layer<T>> layers_;
};

template <typename T>
struct BackboneOutput {
  // Outputs of blocks 1..C-1 (the attachment points), shallow first.
  std::vector<Tensor<T>> block_features;
  Tensor<T> feature;  // pooled pre-classifier feature [batch, final_feature_dim]
  Tensor<T> logits;   // [batch, num_classes]
};

/// A block-structured CNN: C blocks, global average pooling, linear classifier.
template <typename T>
class Backbone {
 public:
  static Backbone build(const BackboneSpec& spec, std::uint64_t seed);

  BackboneOutput<T> forward(const Tensor<T>& x, ForwardMode mode);
  Tensor<T> logits(const Tensor<T>& x, ForwardMode mode) { return forward(x, mode).logits; }

  const BackboneSpec& spec() const { return spec_; }
  const std::vector<BlockShape>& block_shapes() const { return shapes_; }
  std::size_t num_blocks() const { return blocks_.size(); }

  /// Parameters and buffers, named "block<i>.layer<j>.<field>" and "fc.<field>".
  std::vector<NamedTensor<T>> named_tensors() const;
  std::size_t parameter_count() const;
  /// Deep copy with independent storage.
  Backbone clone() const;

 private:
  BackboneSpec spec_;
  std::vector<BlockShape> shapes_;
  std::vector<Sequential<T>> blocks_;
  Linear<T> fc_;
};

struct GuidedModuleSpec {
  std::size_t in_channels = 0;
  std::size_t in_spatial = 0;
  // Spatial size the stride-2 stages must reach (the backbone's final size).
  std::size_t target_spatial = 0;
  // 0 selects the default max(4, in_channels / 2).
  std::size_t reduce_channels = 0;
  std::size_t out_feature_dim = 0;
  std::size_t num_classes = 0;
};

/// Number of 3x3 stride-2 stages needed to go from in_spatial to target_spatial.
std::size_t guided_stage_count(const GuidedModuleSpec& spec);
std::size_t default_reduce_channels(std::size_t in_channels);

template <typename T>
struct GuidedOutput {
  Tensor<T> feature;
  Tensor<T> logits;
};

/// Bottleneck adapter plus classifier head attached after one backbone block.
///
/// 1x1 reduce -> bn -> relu -> (3x3 stride-2 conv -> bn -> relu)* -> 1x1 expand
/// -> global average pool (the feature) -> linear head (the logits).
template <typename T>
class GuidedModule {
 public:
  static GuidedModule build(const GuidedModuleSpec& spec, std::uint64_t seed);

  GuidedOutput<T> forward(const Tensor<T>& block_feature, ForwardMode mode);
  const GuidedModuleSpec& spec() const { return spec_; }
  std::vector<NamedTensor<T>> named_tensors() const;
  GuidedModule clone() const;

 private:
  GuidedModuleSpec spec_;
  Sequential<T> body_;
  Linear<T> fc_;
};

/// Every classifier output and feature of one stream for one batch.
template <typename T>
struct BlockOutputs {
  std::vector<Tensor<T>> block_features;  // C-1 attachment-point feature maps
  Tensor<T> backbone_feature;
  Tensor<T> backbone_logits;
  // 1-based block index b of each guided head, ascending.
  std::vector<std::size_t> guided_blocks;
  std::vector<Tensor<T>> guided_features;
  std::vector<Tensor<T>> guided_logits;

  std::size_t num_guided() const { return guided_logits.size(); }
  std::size_t num_classifiers() const { return 1 + guided_logits.size(); }
  /// Same outputs with the guided heads dropped.
  BlockOutputs backbone_only() const;
};

struct StreamSpec {
  BackboneSpec backbone;
  // Number of guided pairs, 0..C-1; they attach to the deepest blocks first.
  std::size_t guided_pairs = 0;
  std::size_t reduce_channels = 0;
};

/// Default StreamSpec with C-1 guided modules.
StreamSpec full_stream_spec(const BackboneSpec& backbone);
/// 1-based block indices carrying a guided module, ascending.
std::vector<std::size_t> guided_attachment_blocks(std::size_t num_blocks, std::size_t pairs);

/// A backbone with guided modules attached after some of its blocks.
template <typename T>
class Stream {
 public:
  static Stream build(const StreamSpec& spec, std::uint64_t seed);

  BlockOutputs<T> forward_collect(const Tensor<T>& x, ForwardMode mode);

  Backbone<T>& backbone() { return backbone_; }
  const Backbone<T>& backbone() const { return backbone_; }
  const std::vector<GuidedModule<T>>& guided() const { return guided_; }
  const std::vector<std::size_t>& guided_blocks() const { return guided_blocks_; }
  const StreamSpec& spec() const { return spec_; }

  /// "backbone.*" then "guided<b>.*" for each attached module.
  std::vector<NamedTensor<T>> named_tensors() const;
  std::size_t parameter_count() const;
  /// Standalone copy of the backbone; the guided modules are left behind.
  Backbone<T> export_backbone() const { return backbone_.clone(); }

 private:
  StreamSpec spec_;
  Backbone<T> backbone_;
  std::vector<GuidedModule<T>> guided_;
  std::vector<std::size_t> guided_blocks_;
};

/// Free-function form: runs the backbone, then each guided head on its block feature.
template <typename T>
BlockOutputs<T> forward_collect(Backbone<T>& backbone, std::vector<GuidedModule<T>>& guided,
                                const std::vector<std::size_t>& guided_blocks,
                                const Tensor<T>& x, ForwardMode mode);

/// Only weights and norm parameters (buffers excluded).
template <typename T>
std::vector<NamedTensor<T>> trainable(const std::vector<NamedTensor<T>>& tensors);

}  // namespace ekd::nn
