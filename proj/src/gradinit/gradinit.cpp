#include "gradinit/gradinit/gradinit.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <unordered_set>

#include "gradinit/autodiff/ops.hpp"
#include "gradinit/optim/optim.hpp"

namespace gi::gradinit {

using namespace gi::ad;

std::string to_string(StepAlgo algo) { return algo == StepAlgo::sgd ? "sgd" : "adam"; }

StepAlgo step_algo_from_string(const std::string& name) {
  if (name == "sgd") return StepAlgo::sgd;
  if (name == "adam") return StepAlgo::adam;
  throw std::invalid_argument("unknown step algorithm '" + name + "' (expected sgd or adam)");
}

int norm_order(StepAlgo algo) { return algo == StepAlgo::sgd ? 2 : 1; }

Real recommend_gamma(StepAlgo algo, Real eta) {
  if (!(eta > 0)) throw std::invalid_argument("recommend_gamma: eta must be positive");
  return algo == StepAlgo::sgd ? std::sqrt(Real(0.1) / eta) : Real(0.1) / eta;
}

std::string to_string(Branch branch) {
  switch (branch) {
    case Branch::constraint: return "constraint";
    case Branch::objective: return "objective";
    case Branch::penalty: return "penalty";
  }
  return "unknown";
}

void GradInitConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& what) {
    throw std::invalid_argument("gradinit." + field + ": " + what);
  };
  if (!(eta > 0)) fail("eta", "must be positive");
  if (gamma && !(*gamma > 0)) fail("gamma", "must be positive");
  if (!(tau >= 0)) fail("tau", "must be non-negative");
  if (iterations < 1) fail("iterations", "must be at least 1");
  if (!(overlap >= 0 && overlap <= 1)) fail("overlap", "must lie in [0, 1]");
  if (!(alpha_lower > 0)) fail("alpha_lower", "must be positive");
  if (!(meta_beta1 >= 0 && meta_beta1 < 1)) fail("meta_beta1", "must lie in [0, 1)");
  if (!(meta_beta2 >= 0 && meta_beta2 < 1)) fail("meta_beta2", "must lie in [0, 1)");
  if (!(meta_eps > 0)) fail("meta_eps", "must be positive");
  if (batch_size < 1) fail("batch_size", "must be at least 1");
  if (fix_norm_scales && only_norm_scales) fail("only_norm_scales", "cannot be combined with fix_norm_scales");
}

LossProblem LossProblem::from(const nn::Model& model) {
  LossProblem p;
  for (const auto& b : model.blocks()) {
    p.names.push_back(b.name);
    p.weights.push_back(b.tensor);
    p.is_norm.push_back(nn::is_norm(b.role));
  }
  const nn::Model* m = &model;
  p.loss = [m](std::span<const Tensor> view, const data::Batch& batch) {
    return m->forward(batch, view, nn::Mode::train).loss;
  };
  return p;
}

ScaleVector ScaleVector::ones(const LossProblem& problem, const GradInitConfig& config) {
  ScaleVector s;
  s.alphas.assign(problem.size(), Real(1));
  s.trainable.resize(problem.size());
  for (std::size_t i = 0; i < problem.size(); ++i) {
    const bool norm = problem.is_norm[i];
    s.trainable[i] = config.fix_norm_scales ? !norm : (config.only_norm_scales ? norm : true);
  }
  return s;
}

GradMap step_image(StepAlgo algo, const GradMap& g, Real gamma) {
  if (g.empty()) throw std::invalid_argument("step_image of an empty gradient");
  GradMap out;
  out.entries.reserve(g.size());
  if (algo == StepAlgo::adam) {
    for (const auto& e : g.entries) out.entries.push_back(sign(e.detached()));
    return out;
  }
  Real sq = 0;
  for (const auto& e : g.entries)
    for (Real v : e.data()) sq += v * v;
  if (!(sq > 0)) throw DegenerateGradientError("SGD step image of an all-zero gradient");
  const Real f = gamma / std::sqrt(sq);
  for (const auto& e : g.entries) out.entries.push_back(scale(e.detached(), f));
  return out;
}

std::vector<Tensor> rescaled_params(std::span<const Tensor> weights, const std::vector<Tensor>& alphas) {
  if (weights.size() != alphas.size()) {
    throw std::invalid_argument("rescaled_params: " + std::to_string(alphas.size()) + " scales for " +
                                std::to_string(weights.size()) + " blocks");
  }
  std::vector<Tensor> view;
  view.reserve(weights.size());
  for (std::size_t i = 0; i < weights.size(); ++i) view.push_back(mul(weights[i].detached(), alphas[i]));
  return view;
}

std::vector<Tensor> rescaled_params(const nn::Model& model, const std::vector<Tensor>& alphas) {
  const auto w = model.params();
  return rescaled_params(w, alphas);
}

namespace {

// One differentiation session: alpha variables and the rescaled view.
struct Session {
  Tape tape;
  std::vector<Tensor> alphas;
  std::vector<Tensor> view;

  Session(const LossProblem& problem, const std::vector<Real>& values) {
    if (values.size() != problem.size()) {
      throw std::invalid_argument("scale vector has " + std::to_string(values.size()) + " entries, model has " +
                                  std::to_string(problem.size()) + " blocks");
    }
    for (Real a : values) alphas.push_back(tape.variable(Tensor::scalar(a)));
    view = rescaled_params(problem.weights, alphas);
  }

  std::vector<Real> grad_of(const Tensor& value) {
    GradMap d = backward(tape, value, alphas);
    std::vector<Real> out;
    out.reserve(d.size());
    for (const auto& e : d.entries) out.push_back(e.item());
    return out;
  }
};

// theta' = theta_m - eta A[g] with A[g] constant.
std::vector<Tensor> stepped_view(const Session& s, const GradMap& g, const GradInitConfig& config) {
  GradMap img = step_image(config.algo, g, config.resolved_gamma());
  std::vector<Tensor> out;
  out.reserve(s.view.size());
  for (std::size_t i = 0; i < s.view.size(); ++i) out.push_back(sub(s.view[i], scale(img[i], config.eta)));
  return out;
}

// Objective branch given the first-order gradient computed on the session.
ScaleGradient finish_objective(Session& s, const LossProblem& problem, const GradMap& g, Real norm,
                               const data::Batch& s_tilde, const GradInitConfig& config) {
  const int gen = s.tape.generation();
  const auto next = stepped_view(s, g, config);
  Tensor lt = problem.loss(next, s_tilde);
  ScaleGradient r;
  r.grad = s.grad_of(lt);
  r.grad_norm = norm;
  r.value = lt.item();
  r.second_order_evals = s.tape.generation() - gen;
  return r;
}

}  // namespace

Real gradient_norm(const LossProblem& problem, const std::vector<Real>& alphas, const data::Batch& s, int p) {
  Session sess(problem, alphas);
  GradMap g = backward(sess.tape, problem.loss(sess.view, s), sess.view);
  return grad_norm(g, p).item();
}

ScaleGradient objective_grad(const LossProblem& problem, const std::vector<Real>& alphas, const data::Batch& s,
                             const data::Batch& s_tilde, const GradInitConfig& config) {
  config.validate();
  Session sess(problem, alphas);
  GradMap g = backward(sess.tape, problem.loss(sess.view, s), sess.view);
  const Real norm = grad_norm(g, config.p()).item();
  return finish_objective(sess, problem, g, norm, s_tilde, config);
}

ScaleGradient constraint_grad(const LossProblem& problem, const std::vector<Real>& alphas, const data::Batch& s,
                              const GradInitConfig& config) {
  config.validate();
  Session sess(problem, alphas);
  GradMap g = backward(sess.tape, problem.loss(sess.view, s), sess.view, true);
  Tensor n = grad_norm(g, config.p());
  ScaleGradient r;
  r.grad = sess.grad_of(n);
  r.grad_norm = n.item();
  r.value = r.grad_norm;
  r.second_order_evals = sess.tape.generation();
  return r;
}

ScaleGradient penalty_grad(const LossProblem& problem, const std::vector<Real>& alphas, const data::Batch& s,
                           const data::Batch& s_tilde, const GradInitConfig& config, Real lambda) {
  config.validate();
  if (!(lambda >= 0)) throw std::invalid_argument("penalty lambda must be non-negative");
  Session sess(problem, alphas);
  GradMap g = backward(sess.tape, problem.loss(sess.view, s), sess.view, true);
  Tensor n = grad_norm(g, config.p());
  Tensor lt = problem.loss(stepped_view(sess, g, config), s_tilde);
  Tensor total = add(lt, scale(n, lambda));
  ScaleGradient r;
  r.grad = sess.grad_of(total);
  r.grad_norm = n.item();
  r.value = total.item();
  r.second_order_evals = sess.tape.generation();
  return r;
}

Real one_step_objective(const LossProblem& problem, const std::vector<Real>& alphas, const data::Batch& s,
                        const data::Batch& s_tilde, const GradInitConfig& config) {
  Session sess(problem, alphas);
  GradMap g = backward(sess.tape, problem.loss(sess.view, s), sess.view);
  RecordingGuard off(sess.tape, false);
  return problem.loss(stepped_view(sess, g, config), s_tilde).item();
}

std::int64_t clamp_scales(std::vector<Real>& alphas, Real lower) {
  std::int64_t hits = 0;
  for (auto& a : alphas) {
    if (a < lower) {
      a = lower;
      ++hits;
    }
  }
  return hits;
}

std::vector<std::int64_t> mix_batches(const std::vector<std::int64_t>& s, std::int64_t pool_size, Real r,
                                      std::mt19937_64& rng) {
  if (!(r >= 0 && r <= 1)) throw std::invalid_argument("mix_batches: overlap must lie in [0, 1]");
  if (s.empty()) throw std::invalid_argument("mix_batches: empty batch");
  const auto n = static_cast<std::int64_t>(s.size());
  const auto shared = static_cast<std::int64_t>(std::llround(r * static_cast<Real>(n)));
  const std::int64_t fresh = n - shared;
  const std::unordered_set<std::int64_t> in_s(s.begin(), s.end());
  std::vector<std::int64_t> complement;
  complement.reserve(static_cast<std::size_t>(std::max<std::int64_t>(0, pool_size - n)));
  for (std::int64_t i = 0; i < pool_size; ++i)
    if (!in_s.count(i)) complement.push_back(i);
  if (static_cast<std::int64_t>(complement.size()) < fresh) {
    throw data::DataError("mix_batches: pool has " + std::to_string(complement.size()) +
                          " examples outside S, need " + std::to_string(fresh));
  }
  std::vector<std::int64_t> order = s;
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(static_cast<std::size_t>(shared));
  for (auto k : data::sample_indices(static_cast<std::int64_t>(complement.size()), fresh, rng)) {
    order.push_back(complement[static_cast<std::size_t>(k)]);
  }
  return order;
}

namespace {

enum class RunKind { constrained, penalized };

GradInitResult run(const LossProblem& problem, const data::Dataset& dataset, const GradInitConfig& config,
                   RunKind kind, Real lambda) {
  config.validate();
  if (dataset.size() < config.batch_size) {
    throw data::DataError("dataset of " + std::to_string(dataset.size()) + " examples is smaller than batch size " +
                          std::to_string(config.batch_size));
  }
  const auto start = std::chrono::steady_clock::now();
  const Real gamma = config.resolved_gamma();
  const int p = config.p();

  GradInitResult result;
  result.scales = ScaleVector::ones(problem, config);
  auto& alphas = result.scales.alphas;
  const auto& trainable = result.scales.trainable;
  GradInitReport& report = result.report;
  report.block_names = problem.names;
  report.gamma = gamma;
  report.records.reserve(static_cast<std::size_t>(config.iterations));

  optim::Adam meta(optim::AdamOptions{config.meta_beta1, config.meta_beta2, config.meta_eps, 0, false});
  std::vector<Tensor> meta_params;
  for (Real a : alphas) meta_params.push_back(Tensor::scalar(a));

  std::mt19937_64 rng(config.seed);
  data::Batch last;
  for (std::int64_t t = 0; t < config.iterations; ++t) {
    const auto s_idx = data::sample_indices(dataset.size(), config.batch_size, rng);
    data::Batch s = dataset.batch(s_idx);
    IterationRecord rec;
    rec.iter = t;
    ScaleGradient step;
    if (kind == RunKind::penalized) {
      data::Batch st = dataset.batch(mix_batches(s_idx, dataset.size(), config.overlap, rng));
      step = penalty_grad(problem, alphas, s, st, config, lambda);
      rec.branch = Branch::penalty;
      rec.objective_loss = step.value;
    } else {
      Session sess(problem, alphas);
      GradMap g = backward(sess.tape, problem.loss(sess.view, s), sess.view);
      const Real norm = grad_norm(g, p).item();
      if (norm > gamma) {
        step = constraint_grad(problem, alphas, s, config);
        step.grad_norm = norm;
        rec.branch = Branch::constraint;
        ++report.constraint_iterations;
      } else {
        data::Batch st = dataset.batch(mix_batches(s_idx, dataset.size(), config.overlap, rng));
        step = finish_objective(sess, problem, g, norm, st, config);
        rec.branch = Branch::objective;
        rec.objective_loss = step.value;
      }
    }
    rec.grad_norm = step.grad_norm;
    rec.second_order_evals = step.second_order_evals;

    std::vector<Tensor> grads;
    grads.reserve(alphas.size());
    for (std::size_t i = 0; i < alphas.size(); ++i) {
      grads.push_back(Tensor::scalar(trainable[i] ? step.grad[i] : Real(0)));
      meta_params[i].mutable_data()[0] = alphas[i];
    }
    meta.step(meta_params, grads, config.tau);
    for (std::size_t i = 0; i < alphas.size(); ++i) {
      if (trainable[i]) alphas[i] = meta_params[i].item();
    }
    rec.clamp_hits = clamp_scales(alphas, config.alpha_lower);
    report.records.push_back(std::move(rec));
    last = std::move(s);
  }
  report.final_grad_norm = gradient_norm(problem, alphas, last, p);
  report.alphas = alphas;
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace

GradInitResult gradinit_run(const LossProblem& problem, const data::Dataset& dataset, const GradInitConfig& config) {
  return run(problem, dataset, config, RunKind::constrained, 0);
}

GradInitResult gradinit_run(const nn::Model& model, const data::Dataset& dataset, const GradInitConfig& config) {
  return gradinit_run(LossProblem::from(model), dataset, config);
}

GradInitResult penalty_run(const LossProblem& problem, const data::Dataset& dataset, const GradInitConfig& config,
                           Real lambda) {
  return run(problem, dataset, config, RunKind::penalized, lambda);
}

GradInitResult penalty_run(const nn::Model& model, const data::Dataset& dataset, const GradInitConfig& config,
                           Real lambda) {
  return penalty_run(LossProblem::from(model), dataset, config, lambda);
}

LearnedScales LearnedScales::from(const nn::Model& model, const ScaleVector& scales) {
  if (scales.size() != model.size()) throw std::invalid_argument("scale vector length does not match model");
  LearnedScales out;
  for (const auto& b : model.blocks()) out.block_names.push_back(b.name);
  out.alphas = scales.alphas;
  return out;
}

void apply_scales(nn::Model& model, LearnedScales& scales) {
  if (scales.consumed) throw std::logic_error("apply_scales: scales were already applied");
  if (scales.alphas.size() != model.size() || scales.block_names.size() != model.size()) {
    throw std::invalid_argument("apply_scales: " + std::to_string(scales.alphas.size()) + " scales for " +
                                std::to_string(model.size()) + " blocks");
  }
  for (std::size_t i = 0; i < model.size(); ++i) {
    if (scales.block_names[i] != model.blocks()[i].name) {
      throw std::invalid_argument("apply_scales: block " + std::to_string(i) + " is " + model.blocks()[i].name +
                                  ", scales name " + scales.block_names[i]);
    }
  }
  for (std::size_t i = 0; i < model.size(); ++i) {
    const Real a = scales.alphas[i];
    for (auto& v : model.blocks()[i].tensor.mutable_data()) v *= a;
  }
  scales.consumed = true;
}

}  // namespace gi::gradinit
