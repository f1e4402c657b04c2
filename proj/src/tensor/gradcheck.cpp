// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipn/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace ipn {

Tensor64 finite_diff_grad(const std::function<double()>& f, Tensor64 param, double h) {
  if (h <= 0.0) throw ContractError("finite_diff_grad: step must be positive");
  NoGradGuard no_grad;
  std::vector<double> out(param.numel());
  auto data = param.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double saved = data[i];
    data[i] = saved + h;
    const double plus = f();
    data[i] = saved - h;
    const double minus = f();
    data[i] = saved;
    out[i] = (plus - minus) / (2.0 * h);
  }
  return Tensor64::from_data(param.shape(), std::move(out));
}

double max_relative_error(std::span<const double> analytic, std::span<const double> numeric,
                          double floor) {
  if (analytic.size() != numeric.size()) {
    throw DimensionError("max_relative_error: " + std::to_string(analytic.size()) + " vs " +
                         std::to_string(numeric.size()) + " entries");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), floor});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

}  // namespace ipn
