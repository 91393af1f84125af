#include "gradinit/autodiff/grad.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "gradinit/autodiff/ops.hpp"

namespace gi::ad {
namespace {

/// sqrt with the adjoint at zero defined as zero.
Tensor safe_sqrt(const Tensor& s) {
  const Real v = s.item();
  Tensor out = Tensor::scalar(std::sqrt(v));
  if (!s.has_node() || !s.tape()->recording()) return out;
  return s.tape()->record(std::move(out), "safe_sqrt", {s},
                          [s](const Tensor& g, const std::vector<bool>&) -> std::vector<Tensor> {
                            if (s.item() <= Real(0)) return {Tensor::zeros(s.shape())};
                            return {div(g, scale(safe_sqrt(s), Real(2)))};
                          });
}

}  // namespace

std::int64_t GradMap::numel() const {
  std::int64_t n = 0;
  for (const auto& e : entries) n += e.size();
  return n;
}

std::vector<Real> GradMap::flatten() const {
  std::vector<Real> out;
  out.reserve(static_cast<std::size_t>(numel()));
  for (const auto& e : entries) out.insert(out.end(), e.data().begin(), e.data().end());
  return out;
}

GradMap GradMap::detached() const {
  GradMap out;
  out.entries.reserve(entries.size());
  for (const auto& e : entries) out.entries.push_back(e.detached());
  return out;
}

GradMap backward(Tape& tape, const Tensor& output, const std::vector<Tensor>& wrt,
                 bool create_graph) {
  return GradMap{tape.gradients(output, wrt, create_graph)};
}

Tensor grad_norm(const GradMap& g, int p) {
  if (p != 1 && p != 2) throw std::invalid_argument("grad_norm: p must be 1 or 2");
  if (g.empty()) throw std::invalid_argument("grad_norm of empty gradient");
  Tensor total;
  for (const auto& e : g.entries) {
    Tensor part = p == 1 ? sum(abs(e)) : sum(mul(e, e));
    total = total.defined() ? add(total, part) : part;
  }
  return p == 1 ? total : safe_sqrt(total);
}

FiniteDiffReport finite_diff_check(const ScalarFn& f, const std::vector<Tensor>& point, double h,
                                   double tol) {
  if (!(h > 0)) throw std::invalid_argument("finite_diff_check: step must be positive");
  std::vector<std::vector<Real>> analytic;
  {
    Tape tape;
    std::vector<Tensor> vars;
    vars.reserve(point.size());
    for (const auto& p : point) vars.push_back(tape.variable(p));
    Tensor out = f(tape, vars);
    for (const auto& gr : tape.gradients(out, vars, false)) {
      analytic.emplace_back(gr.data().begin(), gr.data().end());
    }
  }

  auto evaluate = [&](const std::vector<Tensor>& at) {
    Tape tape;
    std::vector<Tensor> vars;
    vars.reserve(at.size());
    for (const auto& p : at) vars.push_back(tape.variable(p));
    return static_cast<double>(f(tape, vars).item());
  };

  FiniteDiffReport report;
  std::vector<Tensor> work;
  work.reserve(point.size());
  for (const auto& p : point) work.push_back(p.clone());
  for (std::size_t k = 0; k < work.size(); ++k) {
    for (std::int64_t j = 0; j < work[k].size(); ++j) {
      const auto uj = static_cast<std::size_t>(j);
      const Real original = work[k].data()[uj];
      work[k].mutable_data()[uj] = original + static_cast<Real>(h);
      const double up = evaluate(work);
      work[k].mutable_data()[uj] = original - static_cast<Real>(h);
      const double down = evaluate(work);
      work[k].mutable_data()[uj] = original;

      const double numeric = (up - down) / (2 * h);
      const double a = analytic[k][uj];
      const double abs_err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
      report.max_abs_err = std::max(report.max_abs_err, abs_err);
      if (abs_err / denom >= report.max_rel_err) {
        report.max_rel_err = abs_err / denom;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
      ++report.coordinates;
    }
  }
  report.pass = report.max_rel_err < tol;
  return report;
}

}  // namespace gi::ad
