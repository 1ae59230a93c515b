#pragma once

// Central-difference gradient verification against the reverse-mode engine,
// always at double precision. The builder is re-invoked for every perturbed
// evaluation, so ops with internal saved state are exercised end to end.

#include <functional>
#include <vector>

#include "horec/autodiff.hpp"
#include "horec/core.hpp"
#include "horec/tensor.hpp"

namespace horec::testsupport {

using VarD = ad::Var<double>;
using BuildFn = std::function<VarD(const std::vector<VarD>&)>;

struct GradCheckReport {
  double max_rel_err = 0.0;
  double grad_scale = 0.0;
  std::int64_t coords_checked = 0;
};

inline GradCheckReport fd_check(const BuildFn& build,
                                const std::vector<Tensor<double>>& inputs,
                                int coords_per_input = 20,
                                double h_base = 1e-5,
                                std::uint64_t seed = 7) {
  std::vector<VarD> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.push_back(VarD::leaf(t, true));
  VarD root = build(leaves);
  ad::backward(root);

  std::vector<Tensor<double>> analytic;
  for (auto& v : leaves)
    analytic.push_back(v.node()->grad_ready ? v.grad()
                                            : Tensor<double>(v.value().shape()));

  auto eval_at = [&](const std::vector<Tensor<double>>& vals) {
    std::vector<VarD> ls;
    ls.reserve(vals.size());
    for (const auto& t : vals) ls.push_back(VarD::leaf(t, false));
    return build(ls).item();
  };

  Rng rng(seed);
  // Gradient magnitude across all checked coordinates anchors the relative
  // floor, so zero-gradient coordinates do not divide by zero.
  double scale = 0.0;
  std::vector<std::vector<std::int64_t>> picks(inputs.size());
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::int64_t n = inputs[i].numel();
    std::int64_t want = std::min<std::int64_t>(coords_per_input, n);
    std::vector<std::int64_t> idx;
    if (want == n) {
      for (std::int64_t k = 0; k < n; ++k) idx.push_back(k);
    } else {
      std::unordered_set<std::int64_t> seen;
      while (static_cast<std::int64_t>(idx.size()) < want) {
        auto k = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n)));
        if (seen.insert(k).second) idx.push_back(k);
      }
    }
    for (auto k : idx) scale = std::max(scale, std::abs(analytic[i][k]));
    picks[i] = std::move(idx);
  }

  GradCheckReport rep;
  rep.grad_scale = scale;
  std::vector<Tensor<double>> work = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (auto k : picks[i]) {
      double x0 = inputs[i][k];
      double h = h_base * std::max(1.0, std::abs(x0));
      work[i][k] = x0 + h;
      double fp = eval_at(work);
      work[i][k] = x0 - h;
      double fm = eval_at(work);
      work[i][k] = x0;
      double fd = (fp - fm) / (2.0 * h);
      double a = analytic[i][k];
      double denom = std::max({std::abs(a), std::abs(fd), 1e-4 * scale + 1e-9});
      rep.max_rel_err = std::max(rep.max_rel_err, std::abs(a - fd) / denom);
      ++rep.coords_checked;
    }
  }
  return rep;
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0,
                                    double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace horec::testsupport

#include "horec/nn.hpp"

namespace horec::testsupport {

// Same check, but differentiating with respect to parameters that live in a
// ParamStore. The loss builder reads current parameter values each call.
inline GradCheckReport fd_check_params(
    const std::vector<nn::Parameter<double>*>& params,
    const std::function<VarD()>& loss, int coords_per_param = 12,
    double h_base = 1e-5, std::uint64_t seed = 7) {
  for (auto* p : params) p->var.node()->grad_ready = false;
  VarD root = loss();
  ad::backward(root);
  std::vector<Tensor<double>> analytic;
  for (auto* p : params)
    analytic.push_back(p->var.node()->grad_ready
                           ? p->var.grad()
                           : Tensor<double>(p->value().shape()));

  Rng rng(seed);
  double scale = 0.0;
  std::vector<std::vector<std::int64_t>> picks(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::int64_t n = params[i]->value().numel();
    std::int64_t want = std::min<std::int64_t>(coords_per_param, n);
    std::unordered_set<std::int64_t> seen;
    while (static_cast<std::int64_t>(picks[i].size()) < want) {
      auto k = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n)));
      if (seen.insert(k).second) picks[i].push_back(k);
    }
    for (auto k : picks[i]) scale = std::max(scale, std::abs(analytic[i][k]));
  }

  GradCheckReport rep;
  rep.grad_scale = scale;
  for (std::size_t i = 0; i < params.size(); ++i) {
    for (auto k : picks[i]) {
      double x0 = params[i]->value()[k];
      double h = h_base * std::max(1.0, std::abs(x0));
      params[i]->value()[k] = x0 + h;
      double fp = loss().item();
      params[i]->value()[k] = x0 - h;
      double fm = loss().item();
      params[i]->value()[k] = x0;
      double fd = (fp - fm) / (2.0 * h);
      double a = analytic[i][k];
      double denom = std::max({std::abs(a), std::abs(fd), 1e-4 * scale + 1e-9});
      rep.max_rel_err = std::max(rep.max_rel_err, std::abs(a - fd) / denom);
      ++rep.coords_checked;
    }
  }
  return rep;
}

}  // namespace horec::testsupport
