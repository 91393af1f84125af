#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gradinit/autodiff/tensor.hpp"
#include "gradinit/data/dataset.hpp"

namespace gi::nn {

using ad::Tensor;

enum class Role { conv_kernel, fc_weight, bias, norm_scale, norm_bias, embedding };

std::string to_string(Role role);
bool is_norm(Role role);

struct ParamBlock {
  std::string name;
  Tensor tensor;
  Role role = Role::fc_weight;
  std::int64_t fan_in = 0;
  std::int64_t fan_out = 0;
};

enum class ArchKind { mlp, plaincnn, resnet, postln_transformer };

std::string to_string(ArchKind kind);
ArchKind arch_kind_from_string(const std::string& name);

struct ArchSpec {
  ArchKind kind = ArchKind::mlp;

  // mlp: layer sizes including input and output, e.g. {784, 256, 10}.
  // plaincnn: conv channels per layer; a layer whose width exceeds the
  // previous one has stride 2. resnet: per-stage widths.
  std::vector<std::int64_t> widths;
  bool use_batchnorm = false;
  bool use_layernorm = false;

  // Image tasks.
  std::int64_t in_channels = 1;
  std::int64_t image_size = 28;
  std::int64_t num_classes = 10;

  // resnet: blocks per stage (same length as widths); stage 0 keeps the
  // stem resolution, later stages halve it.
  std::vector<std::int64_t> residual_blocks;

  // postln-transformer.
  std::int64_t vocab = 16;
  std::int64_t model_dim = 64;
  std::int64_t heads = 4;
  std::int64_t ffn_dim = 128;
  std::int64_t encoder_layers = 2;
  std::int64_t decoder_layers = 2;
  std::int64_t max_length = 64;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

/// Convenience specs used by the harness and tests.
ArchSpec mlp_spec(std::vector<std::int64_t> widths, bool batchnorm = false);
ArchSpec plaincnn_spec(std::vector<std::int64_t> channels, std::int64_t in_channels,
                       std::int64_t image_size, std::int64_t classes, bool batchnorm = false);
ArchSpec resnet_spec(std::vector<std::int64_t> widths, std::vector<std::int64_t> blocks,
                     std::int64_t in_channels, std::int64_t image_size, std::int64_t classes,
                     bool batchnorm);
ArchSpec transformer_spec(std::int64_t vocab);

enum class Mode { train, eval };

struct ForwardResult {
  Tensor logits;
  Tensor loss;
  std::int64_t correct = 0;   // argmax hits
  std::int64_t examples = 0;  // rows scored (tokens for the sequence task)
  // Batch statistics of each BatchNorm layer (train mode), in layer order.
  std::vector<Tensor> bn_mean, bn_var;
};

/// Parameters plus architecture. Copies are deep for parameter values (the
/// tensors are copy-on-write) and cheap otherwise.
class Model {
 public:
  Model() = default;

  const ArchSpec& spec() const { return spec_; }
  std::vector<ParamBlock>& blocks() { return blocks_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  std::size_t size() const { return blocks_.size(); }
  std::int64_t parameter_count() const;
  std::int64_t find(const std::string& name) const;  // -1 when absent

  /// Current parameter tensors in block order.
  std::vector<Tensor> params() const;
  void set_params(std::span<const Tensor> values);

  /// Forward pass and mean cross-entropy using `view` in place of the stored
  /// parameters (same order and shapes). Tape-recorded when `view` is.
  ForwardResult forward(const data::Batch& batch, std::span<const Tensor> view, Mode mode) const;
  ForwardResult forward(const data::Batch& batch, Mode mode) const;

  /// Folds batch statistics from a train-mode forward into the running
  /// averages (momentum 0.1).
  void update_running_stats(const ForwardResult& result);
  std::size_t batchnorm_layers() const { return running_mean_.size(); }
  const std::vector<Tensor>& running_mean() const { return running_mean_; }
  const std::vector<Tensor>& running_var() const { return running_var_; }
  /// Replaces the running averages; counts and shapes must match.
  void set_running_stats(std::vector<Tensor> mean, std::vector<Tensor> var);

  /// Residual block count (resnet only).
  std::int64_t residual_block_count() const;

 private:
  friend Model build_model(const ArchSpec& spec, std::uint64_t seed);
  struct Builder;

  ArchSpec spec_;
  std::vector<ParamBlock> blocks_;
  std::vector<Tensor> running_mean_, running_var_;
};

inline constexpr Real kRunningStatMomentum = Real(0.1);

/// Builds and initializes: Kaiming for conv/fc weights (Xavier for the
/// transformer), zero biases, unit norm scales, zero norm biases.
Model build_model(const ArchSpec& spec, std::uint64_t seed);

}  // namespace gi::nn
