#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gradinit/data/dataset.hpp"
#include "gradinit/gradinit/gradinit.hpp"
#include "gradinit/nn/model.hpp"

namespace gi::diag {

using ad::Tensor;

struct LayerRecord {
  std::string block_name;
  std::string role;
  Real weight_mag = 0;  // ||W||_2 / numel
  std::optional<Real> grad_std;
  // grad_std over the mean |g| entry; 0 when that mean is below 1e-12.
  std::optional<Real> grad_rel_std;
};

/// One record per block, in model order.
struct LayerProfile {
  std::vector<LayerRecord> records;
  std::size_t size() const { return records.size(); }
};

LayerProfile weight_norm_profile(const nn::Model& model);

struct VarianceOptions {
  std::int64_t batches = 16;
  std::int64_t batch_size = 128;
  std::uint64_t seed = 0;
};

/// Gradients on K disjoint seeded batches; per block the per-element variance
/// across batches (1/(K-1)), averaged over elements, square-rooted. The weight
/// side is filled as well. Throws data::DataError when the dataset cannot
/// supply K disjoint batches.
LayerProfile grad_variance_profile(const nn::Model& model, const data::Dataset& dataset,
                                   const VarianceOptions& options = {});
/// Same on an arbitrary loss; roles are reported as "param".
LayerProfile grad_variance_profile(const gradinit::LossProblem& problem, const data::Dataset& dataset,
                                   const VarianceOptions& options = {});

enum class ProfileFormat { csv, json };
ProfileFormat profile_format_from_string(const std::string& name);

/// CSV header block_name,role,weight_mag,grad_std,grad_rel_std (empty cells for
/// missing values) or a JSON array of objects (null). 9 significant digits.
/// Throws std::runtime_error on I/O failure.
void emit_profiles(const LayerProfile& profile, const std::filesystem::path& path, ProfileFormat format);

/// x [n, d] -> dL/dx for y = (x - mu) / sqrt(var + eps), unit scale, zero shift:
/// (g - mean(g) - y mean(g y)) / sqrt(var + eps), column-wise.
Tensor bn_backward_analytic(const Tensor& x, const Tensor& grad_y, Real eps);

struct BnProbeResult {
  Real input_variance = 0;      // alpha^2 sigma^2 with sigma^2 = 1
  Real var_ratio = 0;           // mean over trials of Var[dL/dx] / Var[dL/dy]
  Real magnified_fraction = 0;  // trials with ratio > 1
  Real appendix_bound = 0;      // n(n-1) / (n^2 (alpha^2 sigma^2 + eps))
  Real projection_expectation = 0;  // (n-2) / (n (alpha^2 sigma^2 + eps))
  bool predicted_magnify = false;   // alpha^2 sigma^2 < (n-1)/n
  std::int64_t trials = 0;
};

inline constexpr Real kProbeEps = Real(1e-8);

/// Monte-Carlo probe of BatchNorm gradient magnification: inputs standardized
/// per column and scaled by alpha, upstream gradients i.i.d. N(0, 1).
BnProbeResult bn_magnification_probe(std::int64_t n, std::int64_t d, Real alpha, std::int64_t trials,
                                     std::uint64_t seed = 0);

}  // namespace gi::diag
