#include "gradinit/diagnostics/diagnostics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <stdexcept>

#include <json.hpp>

#include "gradinit/autodiff/grad.hpp"

namespace gi::diag {
namespace {

Real per_dim_magnitude(const Tensor& t) {
  Real sq = 0;
  for (Real v : t.data()) sq += v * v;
  return t.size() == 0 ? 0 : std::sqrt(sq) / static_cast<Real>(t.size());
}

std::string fmt9(Real v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
  return buf;
}

LayerProfile variance_profile(const gradinit::LossProblem& problem, const std::vector<std::string>& roles,
                              const data::Dataset& dataset, const VarianceOptions& opt) {
  if (opt.batches < 2) throw std::invalid_argument("grad_variance_profile: need at least 2 batches");
  if (opt.batch_size < 1) throw std::invalid_argument("grad_variance_profile: batch_size must be positive");
  if (opt.batches * opt.batch_size > dataset.size()) {
    throw data::DataError("grad_variance_profile: " + std::to_string(opt.batches) + " disjoint batches of " +
                          std::to_string(opt.batch_size) + " need more than " + std::to_string(dataset.size()) +
                          " examples");
  }
  std::mt19937_64 rng(opt.seed);
  const auto order = data::sample_indices(dataset.size(), opt.batches * opt.batch_size, rng);

  const std::size_t m = problem.size();
  std::vector<std::vector<Real>> sum(m), sumsq(m), sumabs(m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto n = static_cast<std::size_t>(problem.weights[i].size());
    sum[i].assign(n, 0);
    sumsq[i].assign(n, 0);
    sumabs[i].assign(n, 0);
  }
  for (std::int64_t k = 0; k < opt.batches; ++k) {
    std::span<const std::int64_t> idx(order.data() + k * opt.batch_size, static_cast<std::size_t>(opt.batch_size));
    const data::Batch batch = dataset.batch(idx);
    ad::Tape tape;
    std::vector<Tensor> vars;
    for (const auto& w : problem.weights) vars.push_back(tape.variable(w));
    const ad::GradMap g = ad::backward(tape, problem.loss(vars, batch), vars);
    for (std::size_t i = 0; i < m; ++i) {
      const auto gd = g[i].data();
      for (std::size_t j = 0; j < gd.size(); ++j) {
        sum[i][j] += gd[j];
        sumsq[i][j] += gd[j] * gd[j];
        sumabs[i][j] += std::abs(gd[j]);
      }
    }
  }

  LayerProfile out;
  const auto kk = static_cast<Real>(opt.batches);
  for (std::size_t i = 0; i < m; ++i) {
    Real var_total = 0, abs_total = 0;
    for (std::size_t j = 0; j < sum[i].size(); ++j) {
      const Real mu = sum[i][j] / kk;
      // Deviations are tiny relative to the mean for some blocks; clamp the
      // cancellation residue.
      var_total += std::max(Real(0), (sumsq[i][j] - kk * mu * mu) / (kk - 1));
      abs_total += sumabs[i][j] / kk;
    }
    const auto d = static_cast<Real>(std::max<std::size_t>(sum[i].size(), 1));
    const Real sd = std::sqrt(var_total / d);
    const Real mean_abs = abs_total / d;
    LayerRecord r;
    r.block_name = problem.names[i];
    r.role = roles[i];
    r.weight_mag = per_dim_magnitude(problem.weights[i]);
    r.grad_std = sd;
    r.grad_rel_std = mean_abs < Real(1e-12) ? Real(0) : sd / mean_abs;
    out.records.push_back(std::move(r));
  }
  return out;
}

}  // namespace

LayerProfile weight_norm_profile(const nn::Model& model) {
  LayerProfile out;
  for (const auto& b : model.blocks()) {
    LayerRecord r;
    r.block_name = b.name;
    r.role = nn::to_string(b.role);
    r.weight_mag = per_dim_magnitude(b.tensor);
    out.records.push_back(std::move(r));
  }
  return out;
}

LayerProfile grad_variance_profile(const nn::Model& model, const data::Dataset& dataset,
                                   const VarianceOptions& options) {
  std::vector<std::string> roles;
  for (const auto& b : model.blocks()) roles.push_back(nn::to_string(b.role));
  return variance_profile(gradinit::LossProblem::from(model), roles, dataset, options);
}

LayerProfile grad_variance_profile(const gradinit::LossProblem& problem, const data::Dataset& dataset,
                                   const VarianceOptions& options) {
  return variance_profile(problem, std::vector<std::string>(problem.size(), "param"), dataset, options);
}

ProfileFormat profile_format_from_string(const std::string& name) {
  if (name == "csv") return ProfileFormat::csv;
  if (name == "json") return ProfileFormat::json;
  throw std::invalid_argument("unknown profile format '" + name + "' (csv or json)");
}

void emit_profiles(const LayerProfile& profile, const std::filesystem::path& path, ProfileFormat format) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  if (format == ProfileFormat::csv) {
    out << "block_name,role,weight_mag,grad_std,grad_rel_std\n";
    for (const auto& r : profile.records) {
      out << r.block_name << ',' << r.role << ',' << fmt9(r.weight_mag) << ','
          << (r.grad_std ? fmt9(*r.grad_std) : "") << ',' << (r.grad_rel_std ? fmt9(*r.grad_rel_std) : "") << '\n';
    }
  } else {
    // Values are rounded to 9 digits first so a parse returns what was printed.
    auto num = [](std::optional<Real> v) -> nlohmann::json {
      if (!v) return nullptr;
      return std::stod(fmt9(*v));
    };
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& r : profile.records) {
      nlohmann::ordered_json o;
      o["block_name"] = r.block_name;
      o["role"] = r.role;
      o["weight_mag"] = num(r.weight_mag);
      o["grad_std"] = num(r.grad_std);
      o["grad_rel_std"] = num(r.grad_rel_std);
      arr.push_back(std::move(o));
    }
    out << arr.dump(2) << '\n';
  }
  if (!out.flush()) throw std::runtime_error("write failed: " + path.string());
}

Tensor bn_backward_analytic(const Tensor& x, const Tensor& grad_y, Real eps) {
  if (x.shape().size() != 2 || grad_y.shape() != x.shape()) {
    throw std::invalid_argument("bn_backward_analytic: need matching [n, d] tensors");
  }
  const std::int64_t n = x.shape()[0], d = x.shape()[1];
  const auto xv = x.data();
  const auto gv = grad_y.data();
  std::vector<Real> out(xv.size());
  for (std::int64_t c = 0; c < d; ++c) {
    Real mu = 0;
    for (std::int64_t i = 0; i < n; ++i) mu += xv[static_cast<std::size_t>(i * d + c)];
    mu /= static_cast<Real>(n);
    Real var = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const Real t = xv[static_cast<std::size_t>(i * d + c)] - mu;
      var += t * t;
    }
    var /= static_cast<Real>(n);
    const Real inv = 1 / std::sqrt(var + eps);
    Real gmean = 0, gy = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i * d + c);
      gmean += gv[k];
      gy += gv[k] * (xv[k] - mu) * inv;
    }
    gmean /= static_cast<Real>(n);
    gy /= static_cast<Real>(n);
    for (std::int64_t i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i * d + c);
      out[k] = (gv[k] - gmean - (xv[k] - mu) * inv * gy) * inv;
    }
  }
  return Tensor(x.shape(), std::move(out));
}

BnProbeResult bn_magnification_probe(std::int64_t n, std::int64_t d, Real alpha, std::int64_t trials,
                                     std::uint64_t seed) {
  if (n < 2 || d < 1) throw std::invalid_argument("bn_magnification_probe: need n >= 2 and d >= 1");
  if (trials < 100) throw std::invalid_argument("bn_magnification_probe: need at least 100 trials");
  if (!(alpha > 0)) throw std::invalid_argument("bn_magnification_probe: alpha must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<Real> normal(0, 1);
  const auto nn_ = static_cast<Real>(n);
  const std::size_t count = static_cast<std::size_t>(n * d);

  auto var_of = [](std::span<const Real> v) {
    Real mu = 0;
    for (Real x : v) mu += x;
    mu /= static_cast<Real>(v.size());
    Real s = 0;
    for (Real x : v) s += (x - mu) * (x - mu);
    return s / static_cast<Real>(v.size());
  };

  BnProbeResult r;
  r.input_variance = alpha * alpha;
  r.trials = trials;
  r.appendix_bound = nn_ * (nn_ - 1) / (nn_ * nn_ * (r.input_variance + kProbeEps));
  r.projection_expectation = (nn_ - 2) / (nn_ * (r.input_variance + kProbeEps));
  r.predicted_magnify = r.input_variance < (nn_ - 1) / nn_;

  Real ratio_sum = 0;
  std::int64_t magnified = 0;
  std::vector<Real> x(count), g(count);
  for (std::int64_t t = 0; t < trials; ++t) {
    for (auto& v : x) v = normal(rng);
    // Standardize each column so the batch variance is exactly alpha^2.
    for (std::int64_t c = 0; c < d; ++c) {
      Real mu = 0, var = 0;
      for (std::int64_t i = 0; i < n; ++i) mu += x[static_cast<std::size_t>(i * d + c)];
      mu /= nn_;
      for (std::int64_t i = 0; i < n; ++i) {
        const Real u = x[static_cast<std::size_t>(i * d + c)] - mu;
        var += u * u;
      }
      const Real f = alpha / std::sqrt(var / nn_);
      for (std::int64_t i = 0; i < n; ++i) {
        auto& v = x[static_cast<std::size_t>(i * d + c)];
        v = (v - mu) * f;
      }
    }
    for (auto& v : g) v = normal(rng);
    const Tensor dx = bn_backward_analytic(Tensor(Shape{n, d}, x), Tensor(Shape{n, d}, g), kProbeEps);
    const Real ratio = var_of(dx.data()) / var_of(g);
    ratio_sum += ratio;
    if (ratio > 1) ++magnified;
  }
  r.var_ratio = ratio_sum / static_cast<Real>(trials);
  r.magnified_fraction = static_cast<Real>(magnified) / static_cast<Real>(trials);
  return r;
}

}  // namespace gi::diag
