#pragma once

#include <cmath>
#include <cstdint>

#include "gradinit/nn/model.hpp"

namespace gi::nn {

/// Deterministic per-block seed derived from a master seed.
std::uint64_t block_seed(std::uint64_t master, std::uint64_t index);

inline Real kaiming_std(std::int64_t fan_in) { return std::sqrt(Real(2) / static_cast<Real>(fan_in)); }
inline Real xavier_bound(std::int64_t fan_in, std::int64_t fan_out) {
  return std::sqrt(Real(6) / static_cast<Real>(fan_in + fan_out));
}

/// N(0, 2/fan_in) entries. Requires a conv-kernel or fc-weight block.
void kaiming_init(ParamBlock& block, std::int64_t fan_in, std::uint64_t seed);
/// U(-b, b) with b = sqrt(6/(fan_in+fan_out)).
void xavier_init(ParamBlock& block, std::int64_t fan_in, std::int64_t fan_out, std::uint64_t seed);

enum class BaseInit { kaiming, xavier };

/// Re-draws every weight block with `method`; biases and norm biases become
/// 0, norm scales 1. Embeddings are N(0, 1/dim) regardless of method.
void initialize(Model& model, BaseInit method, std::uint64_t seed);

/// FixUp-style rescaling on top of the current draws: first conv of each
/// residual block times 1/sqrt(M), second conv and final classifier zeroed.
void fixup_init(Model& model);

}  // namespace gi::nn
