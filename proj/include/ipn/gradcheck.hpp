// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>

#include "ipn/tensor.hpp"

namespace ipn {

/// Central-difference gradient of a scalar function with respect to every
/// element of `param`. `f` must read the current values of `param` and be
/// deterministic. `param` is restored before returning.
Tensor64 finite_diff_grad(const std::function<double()>& f, Tensor64 param, double h = 1e-5);

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor). The floor keeps entries
/// whose true gradient is ~0 from dominating with roundoff.
double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          double floor = 1e-6);

}  // namespace ipn
