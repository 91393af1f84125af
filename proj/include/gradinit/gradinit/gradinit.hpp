#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "gradinit/autodiff/grad.hpp"
#include "gradinit/data/dataset.hpp"
#include "gradinit/nn/model.hpp"

namespace gi::gradinit {

using ad::GradMap;
using ad::Tensor;

/// SGD step image with an all-zero gradient.
class DegenerateGradientError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class StepAlgo { sgd, adam };

std::string to_string(StepAlgo algo);
StepAlgo step_algo_from_string(const std::string& name);

/// l2 for SGD, l1 for Adam.
int norm_order(StepAlgo algo);

/// gamma with eta * gamma^2 = 0.1 (SGD) or eta * gamma = 0.1 (Adam).
Real recommend_gamma(StepAlgo algo, Real eta);

struct GradInitConfig {
  StepAlgo algo = StepAlgo::sgd;
  Real eta = Real(0.1);
  std::optional<Real> gamma;  // recommend_gamma(algo, eta) when empty
  Real tau = Real(1e-2);
  std::int64_t iterations = 300;
  Real overlap = Real(0.5);
  Real alpha_lower = Real(0.01);
  Real meta_beta1 = Real(0.9);
  Real meta_beta2 = Real(0.999);
  Real meta_eps = Real(1e-8);
  std::int64_t batch_size = 128;
  std::uint64_t seed = 0;
  bool fix_norm_scales = false;   // norm-layer alphas stay at 1
  bool only_norm_scales = false;  // only norm-layer alphas are learned

  Real resolved_gamma() const { return gamma ? *gamma : recommend_gamma(algo, eta); }
  int p() const { return norm_order(algo); }
  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
};

enum class Branch { constraint, objective, penalty };
std::string to_string(Branch branch);

struct IterationRecord {
  std::int64_t iter = 0;
  Branch branch = Branch::objective;
  Real grad_norm = 0;
  std::optional<Real> objective_loss;
  std::int64_t clamp_hits = 0;
  // Tape generation bumps during this iteration; zero on objective branches.
  int second_order_evals = 0;
};

struct GradInitReport {
  std::vector<IterationRecord> records;
  std::vector<std::string> block_names;
  std::vector<Real> alphas;
  std::int64_t constraint_iterations = 0;
  // Gradient norm on the last processed batch, evaluated with the final scales.
  Real final_grad_norm = 0;
  Real gamma = 0;
  double wall_seconds = 0;
};

/// What GradInit needs from a network: the constant weights W_i and a loss
/// evaluated at an arbitrary parameter view. `from` keeps a reference to the
/// model, which must outlive the problem.
struct LossProblem {
  std::vector<std::string> names;
  std::vector<Tensor> weights;
  std::vector<bool> is_norm;
  std::function<Tensor(std::span<const Tensor> view, const data::Batch& batch)> loss;

  static LossProblem from(const nn::Model& model);
  std::size_t size() const { return weights.size(); }
};

/// Per-block scales; `trainable` masks the ablation variants.
struct ScaleVector {
  std::vector<Real> alphas;
  std::vector<bool> trainable;

  static ScaleVector ones(const LossProblem& problem, const GradInitConfig& config = {});
  std::size_t size() const { return alphas.size(); }
};

/// Detached image of the first optimizer step: gamma g / ||g||_2 or sign(g).
GradMap step_image(StepAlgo algo, const GradMap& g, Real gamma);

/// theta_m = alpha_i W_i with W constant. `alphas` are scalar tensors (tape
/// variables when differentiating).
std::vector<Tensor> rescaled_params(std::span<const Tensor> weights, const std::vector<Tensor>& alphas);
std::vector<Tensor> rescaled_params(const nn::Model& model, const std::vector<Tensor>& alphas);

struct ScaleGradient {
  std::vector<Real> grad;  // d(objective)/d(alpha_i)
  Real grad_norm = 0;      // ||g_S||_p at the current scales
  Real value = 0;          // L~ (objective), ||g|| (constraint) or L~ + lambda ||g||
  int second_order_evals = 0;
};

/// d L(S~; theta_m - eta A[g]) / d m with the step image held constant.
ScaleGradient objective_grad(const LossProblem& problem, const std::vector<Real>& alphas, const data::Batch& s,
                             const data::Batch& s_tilde, const GradInitConfig& config);
/// d ||g_S||_p / d m via double backward.
ScaleGradient constraint_grad(const LossProblem& problem, const std::vector<Real>& alphas, const data::Batch& s,
                              const GradInitConfig& config);
/// Gradient of the penalized objective L~ + lambda ||g_S||_p.
ScaleGradient penalty_grad(const LossProblem& problem, const std::vector<Real>& alphas, const data::Batch& s,
                           const data::Batch& s_tilde, const GradInitConfig& config, Real lambda);

/// ||g_S||_p at the given scales (first order only).
Real gradient_norm(const LossProblem& problem, const std::vector<Real>& alphas, const data::Batch& s, int p);
/// L(S~; theta_m - eta A[g_S]) without differentiation.
Real one_step_objective(const LossProblem& problem, const std::vector<Real>& alphas, const data::Batch& s,
                        const data::Batch& s_tilde, const GradInitConfig& config);

/// Raises every alpha below `lower` to `lower`; returns the number raised.
std::int64_t clamp_scales(std::vector<Real>& alphas, Real lower);

/// S~ with round(r |S|) indices from S (seeded shuffle) and the rest drawn
/// from the pool excluding S.
std::vector<std::int64_t> mix_batches(const std::vector<std::int64_t>& s, std::int64_t pool_size, Real r,
                                      std::mt19937_64& rng);

struct GradInitResult {
  ScaleVector scales;
  GradInitReport report;
};

/// Constrained GradInit: a constraint step while the gradient norm exceeds
/// gamma, else a step on the one-step loss. The model's weights are not modified.
GradInitResult gradinit_run(const LossProblem& problem, const data::Dataset& dataset, const GradInitConfig& config);
GradInitResult gradinit_run(const nn::Model& model, const data::Dataset& dataset, const GradInitConfig& config);
/// Penalty form: every iteration descends on L~ + lambda ||g||_p.
GradInitResult penalty_run(const LossProblem& problem, const data::Dataset& dataset, const GradInitConfig& config,
                           Real lambda);
GradInitResult penalty_run(const nn::Model& model, const data::Dataset& dataset, const GradInitConfig& config,
                           Real lambda);

/// Learned scales ready to be folded into a model once.
struct LearnedScales {
  std::vector<std::string> block_names;
  std::vector<Real> alphas;
  bool consumed = false;

  static LearnedScales from(const nn::Model& model, const ScaleVector& scales);
};

/// W_i <- alpha_i W_i in place. Throws std::logic_error when already applied.
void apply_scales(nn::Model& model, LearnedScales& scales);

}  // namespace gi::gradinit
