#include "msinet/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "msinet/error.hpp"

namespace msinet {
namespace {

void check_eps(double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw ArgumentError("grad_check: eps must lie in [1e-7, 1e-3]");
}

double evaluate(const ParamScalarFn& f) {
  Tape<double> tape;
  try {
    const double v = f(tape).value()[0];
    if (!std::isfinite(v)) throw EvaluationError("grad_check: function value is not finite");
    return v;
  } catch (const NonFiniteError& e) {
    throw EvaluationError(std::string("grad_check: ") + e.what());
  }
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

}  // namespace

double grad_check_params(const ParamScalarFn& f, std::span<Tensor<double>* const> params, double eps) {
  check_eps(eps);
  std::vector<bool> saved_flags;
  for (auto* p : params) {
    saved_flags.push_back(p->requires_grad());
    p->set_requires_grad(true);
    p->clear_grad();
  }
  {
    Tape<double> tape;
    Var<double> out;
    try {
      out = f(tape);
    } catch (const NonFiniteError& e) {
      throw EvaluationError(std::string("grad_check: ") + e.what());
    }
    if (out.numel() != 1) throw ArgumentError("grad_check: function must return a scalar");
    tape.backward(out);
  }
  double worst = 0.0;
  for (auto* p : params) {
    std::vector<double> analytic(p->grad().begin(), p->grad().end());
    if (analytic.empty()) analytic.assign(p->numel(), 0.0);
    for (std::size_t i = 0; i < p->numel(); ++i) {
      const double orig = (*p)[i];
      (*p)[i] = orig + eps;
      const double up = evaluate(f);
      (*p)[i] = orig - eps;
      const double down = evaluate(f);
      (*p)[i] = orig;
      worst = std::max(worst, relative_error(analytic[i], (up - down) / (2.0 * eps)));
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->set_requires_grad(saved_flags[i]);
  return worst;
}

double grad_check(const ScalarFn& f, const Tensor<double>& x, double eps) {
  Tensor<double> input = x;
  Tensor<double>* params[] = {&input};
  return grad_check_params([&](Tape<double>& tape) { return f(tape, tape.param(input)); }, params, eps);
}

}  // namespace msinet
