#include "gradinit/nn/model.hpp"

#include <cmath>
#include <stdexcept>

#include "gradinit/autodiff/ops.hpp"
#include "gradinit/nn/init.hpp"
#include "gradinit/nn/layers.hpp"

namespace gi::nn {

using namespace gi::ad;

std::string to_string(Role role) {
  switch (role) {
    case Role::conv_kernel: return "conv-kernel";
    case Role::fc_weight: return "fc-weight";
    case Role::bias: return "bias";
    case Role::norm_scale: return "norm-scale";
    case Role::norm_bias: return "norm-bias";
    case Role::embedding: return "embedding";
  }
  return "unknown";
}

bool is_norm(Role role) { return role == Role::norm_scale || role == Role::norm_bias; }

std::string to_string(ArchKind kind) {
  switch (kind) {
    case ArchKind::mlp: return "mlp";
    case ArchKind::plaincnn: return "plaincnn";
    case ArchKind::resnet: return "resnet";
    case ArchKind::postln_transformer: return "postln-transformer";
  }
  return "unknown";
}

ArchKind arch_kind_from_string(const std::string& name) {
  if (name == "mlp") return ArchKind::mlp;
  if (name == "plaincnn") return ArchKind::plaincnn;
  if (name == "resnet") return ArchKind::resnet;
  if (name == "postln-transformer") return ArchKind::postln_transformer;
  throw std::invalid_argument("unknown architecture '" + name + "'");
}

namespace {

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw std::invalid_argument("arch." + field + ": " + what);
}

bool all_positive(const std::vector<std::int64_t>& v) {
  for (auto x : v)
    if (x <= 0) return false;
  return true;
}

}  // namespace

void ArchSpec::validate() const {
  switch (kind) {
    case ArchKind::mlp:
      require(widths.size() >= 2, "widths", "mlp needs at least input and output sizes");
      require(all_positive(widths), "widths", "extents must be positive");
      break;
    case ArchKind::plaincnn:
    case ArchKind::resnet:
      require(!widths.empty(), "widths", "at least one layer required");
      require(all_positive(widths), "widths", "extents must be positive");
      require(in_channels > 0, "in_channels", "must be positive");
      require(image_size > 0, "image_size", "must be positive");
      require(num_classes > 0, "num_classes", "must be positive");
      if (kind == ArchKind::resnet) {
        require(residual_blocks.size() == widths.size(), "residual_blocks", "one count per stage");
        require(all_positive(residual_blocks), "residual_blocks", "counts must be positive");
      }
      break;
    case ArchKind::postln_transformer:
      require(vocab >= 3, "vocab", "must be at least 3");
      require(model_dim > 0, "model_dim", "must be positive");
      require(heads > 0, "heads", "must be positive");
      require(model_dim % heads == 0, "heads", "must divide model_dim");
      require(ffn_dim > 0, "ffn_dim", "must be positive");
      require(encoder_layers > 0 && decoder_layers > 0, "encoder_layers", "layer counts must be positive");
      require(max_length > 0, "max_length", "must be positive");
      require(use_layernorm, "use_layernorm", "post-LN transformer requires layer norm");
      require(!use_batchnorm, "use_batchnorm", "not supported for the transformer");
      break;
  }
}

ArchSpec mlp_spec(std::vector<std::int64_t> widths, bool batchnorm) {
  ArchSpec s;
  s.kind = ArchKind::mlp;
  s.widths = std::move(widths);
  s.use_batchnorm = batchnorm;
  if (!s.widths.empty()) s.num_classes = s.widths.back();
  return s;
}

ArchSpec plaincnn_spec(std::vector<std::int64_t> channels, std::int64_t in_channels,
                       std::int64_t image_size, std::int64_t classes, bool batchnorm) {
  ArchSpec s;
  s.kind = ArchKind::plaincnn;
  s.widths = std::move(channels);
  s.in_channels = in_channels;
  s.image_size = image_size;
  s.num_classes = classes;
  s.use_batchnorm = batchnorm;
  return s;
}

ArchSpec resnet_spec(std::vector<std::int64_t> widths, std::vector<std::int64_t> blocks,
                     std::int64_t in_channels, std::int64_t image_size, std::int64_t classes,
                     bool batchnorm) {
  ArchSpec s;
  s.kind = ArchKind::resnet;
  s.widths = std::move(widths);
  s.residual_blocks = std::move(blocks);
  s.in_channels = in_channels;
  s.image_size = image_size;
  s.num_classes = classes;
  s.use_batchnorm = batchnorm;
  return s;
}

ArchSpec transformer_spec(std::int64_t vocab) {
  ArchSpec s;
  s.kind = ArchKind::postln_transformer;
  s.vocab = vocab;
  s.num_classes = vocab;
  s.use_layernorm = true;
  return s;
}

// Registers blocks in exactly the order the forward pass consumes them.
struct Model::Builder {
  Model& m;

  void add(std::string name, Shape shape, Role role, std::int64_t fan_in = 0, std::int64_t fan_out = 0) {
    m.blocks_.push_back({std::move(name), Tensor(std::move(shape)), role, fan_in, fan_out});
  }
  void dense(const std::string& name, std::int64_t in, std::int64_t out, bool bias) {
    add(name + ".weight", {in, out}, Role::fc_weight, in, out);
    if (bias) add(name + ".bias", {out}, Role::bias, in, out);
  }
  void conv(const std::string& name, std::int64_t in, std::int64_t out) {
    add(name + ".weight", {out, in, 3, 3}, Role::conv_kernel, in * 9, out * 9);
  }
  void norm(const std::string& name, std::int64_t dim, bool batchnorm) {
    add(name + ".scale", {dim}, Role::norm_scale);
    add(name + ".bias", {dim}, Role::norm_bias);
    if (batchnorm) {
      m.running_mean_.push_back(Tensor::zeros({dim}));
      m.running_var_.push_back(Tensor::full({dim}, 1));
    }
  }
  // Either a BatchNorm layer or a plain bias, depending on the spec.
  void norm_or_bias(const std::string& prefix, std::int64_t dim) {
    if (m.spec_.use_batchnorm) {
      norm(prefix + ".bn", dim, true);
    } else {
      add(prefix + ".bias", {dim}, Role::bias);
    }
  }
  void attention(const std::string& name, std::int64_t d) {
    for (const char* p : {"q", "k", "v", "o"}) {
      add(name + ".w" + p, {d, d}, Role::fc_weight, d, d);
      add(name + ".b" + p, {d}, Role::bias, d, d);
    }
  }

  void build() {
    const ArchSpec& s = m.spec_;
    switch (s.kind) {
      case ArchKind::mlp:
        for (std::size_t l = 0; l + 1 < s.widths.size(); ++l) {
          const std::string name = "fc" + std::to_string(l);
          const bool hidden = l + 2 < s.widths.size();
          add(name + ".weight", {s.widths[l], s.widths[l + 1]}, Role::fc_weight, s.widths[l], s.widths[l + 1]);
          if (hidden) {
            norm_or_bias(name, s.widths[l + 1]);
          } else {
            add(name + ".bias", {s.widths[l + 1]}, Role::bias);
          }
        }
        break;
      case ArchKind::plaincnn: {
        std::int64_t prev = s.in_channels;
        for (std::size_t l = 0; l < s.widths.size(); ++l) {
          const std::string name = "conv" + std::to_string(l);
          conv(name, prev, s.widths[l]);
          norm_or_bias(name, s.widths[l]);
          prev = s.widths[l];
        }
        dense("fc", prev, s.num_classes, true);
        break;
      }
      case ArchKind::resnet: {
        conv("stem", s.in_channels, s.widths[0]);
        norm_or_bias("stem", s.widths[0]);
        std::int64_t prev = s.widths[0];
        for (std::size_t st = 0; st < s.widths.size(); ++st) {
          for (std::int64_t b = 0; b < s.residual_blocks[st]; ++b) {
            const std::string name = "s" + std::to_string(st) + ".b" + std::to_string(b);
            conv(name + ".conv1", prev, s.widths[st]);
            norm_or_bias(name + ".conv1", s.widths[st]);
            conv(name + ".conv2", s.widths[st], s.widths[st]);
            norm_or_bias(name + ".conv2", s.widths[st]);
            prev = s.widths[st];
          }
        }
        dense("fc", prev, s.num_classes, true);
        break;
      }
      case ArchKind::postln_transformer: {
        const std::int64_t d = s.model_dim;
        add("enc.embed", {s.vocab, d}, Role::embedding, s.vocab, d);
        add("dec.embed", {s.vocab, d}, Role::embedding, s.vocab, d);
        for (std::int64_t l = 0; l < s.encoder_layers; ++l) {
          const std::string name = "enc" + std::to_string(l);
          attention(name + ".attn", d);
          norm(name + ".ln1", d, false);
          dense(name + ".ffn1", d, s.ffn_dim, true);
          dense(name + ".ffn2", s.ffn_dim, d, true);
          norm(name + ".ln2", d, false);
        }
        for (std::int64_t l = 0; l < s.decoder_layers; ++l) {
          const std::string name = "dec" + std::to_string(l);
          attention(name + ".self", d);
          norm(name + ".ln1", d, false);
          attention(name + ".cross", d);
          norm(name + ".ln2", d, false);
          dense(name + ".ffn1", d, s.ffn_dim, true);
          dense(name + ".ffn2", s.ffn_dim, d, true);
          norm(name + ".ln3", d, false);
        }
        dense("out", d, s.vocab, true);
        break;
      }
    }
  }
};

Model build_model(const ArchSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model m;
  m.spec_ = spec;
  Model::Builder{m}.build();
  initialize(m, spec.kind == ArchKind::postln_transformer ? BaseInit::xavier : BaseInit::kaiming, seed);
  return m;
}

std::int64_t Model::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& b : blocks_) n += b.tensor.size();
  return n;
}

std::int64_t Model::find(const std::string& name) const {
  for (std::size_t i = 0; i < blocks_.size(); ++i)
    if (blocks_[i].name == name) return static_cast<std::int64_t>(i);
  return -1;
}

std::vector<Tensor> Model::params() const {
  std::vector<Tensor> out;
  out.reserve(blocks_.size());
  for (const auto& b : blocks_) out.push_back(b.tensor);
  return out;
}

void Model::set_params(std::span<const Tensor> values) {
  if (values.size() != blocks_.size()) throw std::invalid_argument("set_params: block count mismatch");
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].shape() != blocks_[i].tensor.shape()) {
      throw std::invalid_argument("set_params: shape mismatch for " + blocks_[i].name);
    }
    blocks_[i].tensor = values[i].detached();
  }
}

std::int64_t Model::residual_block_count() const {
  std::int64_t n = 0;
  for (auto b : spec_.residual_blocks) n += b;
  return spec_.kind == ArchKind::resnet ? n : 0;
}

namespace {

// Walks the parameter view in registration order.
struct Forward {
  const Model& model;
  std::span<const Tensor> view;
  Mode mode;
  ForwardResult& result;
  std::size_t next = 0;
  std::size_t bn_index = 0;

  const Tensor& take() {
    if (next >= view.size()) throw std::logic_error("forward consumed more blocks than registered");
    return view[next++];
  }

  Tensor batchnorm(const Tensor& x) {
    const Tensor& scale_p = take();
    const Tensor& shift = take();
    const std::size_t i = bn_index++;
    const bool spatial = x.rank() == 4;
    if (mode == Mode::eval) {
      const auto& rm = model.running_mean()[i];
      const auto& rv = model.running_var()[i];
      return spatial ? batchnorm2d_inference(x, scale_p, shift, rm, rv)
                     : batchnorm_inference(x, scale_p, shift, rm, rv);
    }
    BatchNormResult r = spatial ? batchnorm2d_forward(x, scale_p, shift) : batchnorm_forward(x, scale_p, shift);
    result.bn_mean.push_back(r.batch_mean);
    result.bn_var.push_back(r.batch_var);
    return r.y;
  }

  Tensor norm_or_bias(const Tensor& x) {
    if (model.spec().use_batchnorm) return batchnorm(x);
    const Tensor& b = take();
    if (x.rank() == 4) return add(x, reshape(b, {1, b.size(), 1, 1}));
    return add(x, b);
  }

  Tensor conv(const Tensor& x, int stride) {
    const Tensor& w = take();
    return conv3x3(x, w, {}, stride);
  }

  Tensor dense_layer(const Tensor& x) {
    const Tensor& w = take();
    const Tensor& b = take();
    return dense(x, w, b);
  }

  // Identity on matching shapes; otherwise strided subsampling with zero
  // channel padding through a fixed selection kernel.
  static Tensor shortcut(const Tensor& x, std::int64_t out_channels, int stride) {
    const std::int64_t in = x.dim(1);
    if (stride == 1 && in == out_channels) return x;
    Tensor k(Shape{out_channels, in, 3, 3});
    auto kv = k.mutable_data();
    for (std::int64_t o = 0; o < std::min(in, out_channels); ++o) kv[static_cast<std::size_t>(((o * in + o) * 3 + 1) * 3 + 1)] = 1;
    return conv2d(x, k, Conv2dGeometry{stride, 1});
  }

  Tensor image_logits(const data::Batch& batch) {
    const ArchSpec& s = model.spec();
    if (!batch.inputs.defined()) throw std::invalid_argument("image model given a batch without inputs");
    const Tensor& x0 = batch.inputs;
    const std::int64_t n = x0.dim(0);
    switch (s.kind) {
      case ArchKind::mlp: {
        if (x0.size() / n != s.widths.front()) {
          throw std::invalid_argument("mlp input of " + std::to_string(x0.size() / n) + " features, expected " +
                                      std::to_string(s.widths.front()));
        }
        Tensor x = reshape(x0, {n, x0.size() / n});
        for (std::size_t l = 0; l + 1 < s.widths.size(); ++l) {
          const Tensor& w = take();
          x = dense(x, w);
          if (l + 2 < s.widths.size()) {
            x = relu(norm_or_bias(x));
          } else {
            x = add(x, take());
          }
        }
        return x;
      }
      case ArchKind::plaincnn: {
        check_image(x0);
        Tensor x = x0;
        for (std::size_t l = 0; l < s.widths.size(); ++l) {
          const int stride = (l > 0 && s.widths[l] > s.widths[l - 1]) ? 2 : 1;
          x = relu(norm_or_bias(conv(x, stride)));
        }
        return dense_layer(global_avg_pool(x));
      }
      case ArchKind::resnet: {
        check_image(x0);
        Tensor x = relu(norm_or_bias(conv(x0, 1)));
        for (std::size_t st = 0; st < s.widths.size(); ++st) {
          for (std::int64_t b = 0; b < s.residual_blocks[st]; ++b) {
            const int stride = (st > 0 && b == 0) ? 2 : 1;
            Tensor h = relu(norm_or_bias(conv(x, stride)));
            h = norm_or_bias(conv(h, 1));
            x = relu(add(h, shortcut(x, s.widths[st], stride)));
          }
        }
        return dense_layer(global_avg_pool(x));
      }
      case ArchKind::postln_transformer: break;
    }
    throw std::logic_error("image_logits on a sequence model");
  }

  void check_image(const Tensor& x) const {
    const ArchSpec& s = model.spec();
    if (x.rank() != 4 || x.dim(1) != s.in_channels || x.dim(2) != s.image_size || x.dim(3) != s.image_size) {
      throw std::invalid_argument("image batch " + shape_str(x.shape()) + " does not match the architecture");
    }
  }

  AttentionWeights attention_weights() {
    AttentionWeights w;
    w.wq = take(); w.bq = take();
    w.wk = take(); w.bk = take();
    w.wv = take(); w.bv = take();
    w.wo = take(); w.bo = take();
    return w;
  }

  Tensor layer_norm_step(const Tensor& x) {
    const Tensor& scale_p = take();
    const Tensor& shift = take();
    return layer_norm(x, scale_p, shift);
  }

  Tensor ffn(const Tensor& x) {
    const std::int64_t b = x.dim(0), l = x.dim(1), d = x.dim(2);
    Tensor h = relu(dense_layer(reshape(x, {b * l, d})));
    return reshape(dense_layer(h), {b, l, d});
  }

  Tensor embed(const Tensor& table, const std::vector<std::int64_t>& tokens, std::int64_t b, std::int64_t l) {
    const ArchSpec& s = model.spec();
    for (auto t : tokens)
      if (t < 0 || t >= s.vocab) throw std::out_of_range("token " + std::to_string(t) + " outside vocabulary");
    if (l > s.max_length) throw std::invalid_argument("sequence longer than max_length");
    Tensor e = reshape(gather_rows(table, tokens), {b, l, s.model_dim});
    e = scale(e, std::sqrt(static_cast<Real>(s.model_dim)));
    return add(e, sinusoidal_positions(l, s.model_dim));
  }

  Tensor sequence_logits(const data::Batch& batch) {
    const ArchSpec& s = model.spec();
    const auto heads = static_cast<int>(s.heads);
    const std::int64_t ls = batch.source_length, lt = batch.target_length;
    if (ls <= 0 || lt <= 0) throw std::invalid_argument("transformer given a batch without sequences");
    const std::int64_t b = static_cast<std::int64_t>(batch.source.size()) / ls;
    const Tensor& enc_table = take();
    const Tensor& dec_table = take();

    Tensor x = embed(enc_table, batch.source, b, ls);
    for (std::int64_t l = 0; l < s.encoder_layers; ++l) {
      AttentionWeights w = attention_weights();
      x = layer_norm_step(add(x, multi_head_attention(x, x, w, heads, false)));
      x = layer_norm_step(add(x, ffn(x)));
    }
    Tensor y = embed(dec_table, batch.target_in, b, lt);
    for (std::int64_t l = 0; l < s.decoder_layers; ++l) {
      AttentionWeights self = attention_weights();
      y = layer_norm_step(add(y, multi_head_attention(y, y, self, heads, true)));
      AttentionWeights cross = attention_weights();
      y = layer_norm_step(add(y, multi_head_attention(y, x, cross, heads, false)));
      y = layer_norm_step(add(y, ffn(y)));
    }
    return dense_layer(reshape(y, {b * lt, s.model_dim}));
  }
};

}  // namespace

ForwardResult Model::forward(const data::Batch& batch, std::span<const Tensor> view, Mode mode) const {
  if (view.size() != blocks_.size()) throw std::invalid_argument("forward: parameter view has wrong length");
  for (std::size_t i = 0; i < view.size(); ++i) {
    if (view[i].shape() != blocks_[i].tensor.shape()) {
      throw std::invalid_argument("forward: view shape mismatch for " + blocks_[i].name);
    }
  }
  ForwardResult r;
  Forward f{*this, view, mode, r};
  if (spec_.kind == ArchKind::postln_transformer) {
    r.logits = f.sequence_logits(batch);
    r.loss = softmax_cross_entropy(r.logits, batch.target_out);
    r.correct = count_correct(r.logits, batch.target_out);
  } else {
    r.logits = f.image_logits(batch);
    r.loss = softmax_cross_entropy(r.logits, batch.labels);
    r.correct = count_correct(r.logits, std::vector<std::int64_t>(batch.labels.begin(), batch.labels.end()));
  }
  if (f.next != view.size()) throw std::logic_error("forward left parameter blocks unused");
  r.examples = r.logits.dim(0);
  return r;
}

ForwardResult Model::forward(const data::Batch& batch, Mode mode) const {
  const auto p = params();
  return forward(batch, p, mode);
}

void Model::set_running_stats(std::vector<Tensor> mean, std::vector<Tensor> var) {
  if (mean.size() != running_mean_.size() || var.size() != running_var_.size()) {
    throw std::invalid_argument("set_running_stats: expected " + std::to_string(running_mean_.size()) + " layers");
  }
  for (std::size_t i = 0; i < mean.size(); ++i) {
    if (mean[i].shape() != running_mean_[i].shape() || var[i].shape() != running_var_[i].shape()) {
      throw std::invalid_argument("set_running_stats: shape mismatch at layer " + std::to_string(i));
    }
  }
  running_mean_ = std::move(mean);
  running_var_ = std::move(var);
}

void Model::update_running_stats(const ForwardResult& result) {
  if (result.bn_mean.size() != running_mean_.size()) {
    throw std::invalid_argument("update_running_stats: result has no matching batch statistics");
  }
  const Real m = kRunningStatMomentum;
  for (std::size_t i = 0; i < running_mean_.size(); ++i) {
    auto rm = running_mean_[i].mutable_data();
    auto rv = running_var_[i].mutable_data();
    auto bm = result.bn_mean[i].data();
    auto bv = result.bn_var[i].data();
    for (std::size_t j = 0; j < rm.size(); ++j) {
      rm[j] = (1 - m) * rm[j] + m * bm[j];
      rv[j] = (1 - m) * rv[j] + m * bv[j];
    }
  }
}

}  // namespace gi::nn
