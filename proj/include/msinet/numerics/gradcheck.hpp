#pragma once

#include <functional>
#include <span>

#include "msinet/numerics/tape.hpp"

namespace msinet {

// Scalar function of one input, built on a fresh tape per evaluation.
using ScalarFn = std::function<Var<double>(Tape<double>&, Var<double>)>;
// Scalar function of externally owned parameters.
using ParamScalarFn = std::function<Var<double>(Tape<double>&)>;

// Max over elements of |analytic - numeric| / max(1, |analytic|, |numeric|),
// numeric gradients by central differences with step eps in [1e-7, 1e-3].
double grad_check(const ScalarFn& f, const Tensor<double>& x, double eps = 1e-6);

// Same measure over every element of every tensor in `params`. The function
// must register them with tape.param(). Their grad buffers are overwritten.
double grad_check_params(const ParamScalarFn& f, std::span<Tensor<double>* const> params, double eps = 1e-6);

}  // namespace msinet
