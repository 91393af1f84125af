#include "gradinit/nn/init.hpp"

#include <random>
#include <stdexcept>

namespace gi::nn {

std::uint64_t block_seed(std::uint64_t master, std::uint64_t index) {
  // splitmix64 over the pair
  std::uint64_t z = master + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

void require_weight(const ParamBlock& block, const char* who) {
  if (block.role != Role::conv_kernel && block.role != Role::fc_weight) {
    throw std::invalid_argument(std::string(who) + ": block " + block.name + " is not a weight");
  }
}

void fill_normal(ad::Tensor& t, Real std, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<Real> dist(0, std);
  for (auto& v : t.mutable_data()) v = dist(rng);
}

}  // namespace

void kaiming_init(ParamBlock& block, std::int64_t fan_in, std::uint64_t seed) {
  require_weight(block, "kaiming_init");
  if (fan_in <= 0) throw std::invalid_argument("kaiming_init: fan_in must be positive");
  fill_normal(block.tensor, kaiming_std(fan_in), seed);
}

void xavier_init(ParamBlock& block, std::int64_t fan_in, std::int64_t fan_out, std::uint64_t seed) {
  require_weight(block, "xavier_init");
  if (fan_in <= 0 || fan_out <= 0) throw std::invalid_argument("xavier_init: fans must be positive");
  const Real bound = xavier_bound(fan_in, fan_out);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<Real> dist(-bound, bound);
  for (auto& v : block.tensor.mutable_data()) v = dist(rng);
}

void initialize(Model& model, BaseInit method, std::uint64_t seed) {
  auto& blocks = model.blocks();
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    ParamBlock& b = blocks[i];
    const auto s = block_seed(seed, i);
    switch (b.role) {
      case Role::conv_kernel:
      case Role::fc_weight:
        if (method == BaseInit::kaiming) {
          kaiming_init(b, b.fan_in, s);
        } else {
          xavier_init(b, b.fan_in, b.fan_out, s);
        }
        break;
      case Role::embedding:
        fill_normal(b.tensor, Real(1) / std::sqrt(static_cast<Real>(b.tensor.dim(1))), s);
        break;
      case Role::bias:
      case Role::norm_bias:
        b.tensor = ad::Tensor::zeros(b.tensor.shape());
        break;
      case Role::norm_scale:
        b.tensor = ad::Tensor::full(b.tensor.shape(), 1);
        break;
    }
  }
}

void fixup_init(Model& model) {
  const ArchSpec& s = model.spec();
  if (s.kind != ArchKind::resnet || s.use_batchnorm) {
    throw std::invalid_argument("fixup_init requires a resnet without normalization layers");
  }
  const Real first = Real(1) / std::sqrt(static_cast<Real>(model.residual_block_count()));
  auto ends_with = [](const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  for (auto& b : model.blocks()) {
    if (ends_with(b.name, ".conv1.weight")) {
      for (auto& v : b.tensor.mutable_data()) v *= first;
    } else if (ends_with(b.name, ".conv2.weight") || b.name == "fc.weight" || b.name == "fc.bias") {
      b.tensor = ad::Tensor::zeros(b.tensor.shape());
    }
  }
}

}  // namespace gi::nn
