// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipn/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

namespace ipn {

AdamW::AdamW(std::vector<NamedParam> params, AdamWConfig config, float base_lr)
    : params_(std::move(params)), config_(config) {
  std::unordered_set<std::string> seen;
  for (const auto& p : params_) {
    if (!p.tensor.defined()) throw ContractError("AdamW: parameter '" + p.name + "' is undefined");
    if (!p.tensor.requires_grad()) {
      throw ContractError("AdamW: parameter '" + p.name +
                          "' is frozen and cannot be registered with an optimizer");
    }
    if (!seen.insert(p.name).second) {
      throw ContractError("AdamW: parameter '" + p.name + "' registered twice");
    }
    state_.first_moment.emplace_back(p.tensor.numel(), 0.0f);
    state_.second_moment.emplace_back(p.tensor.numel(), 0.0f);
  }
  state_.base_lr = base_lr;
  state_.weight_decay = config.weight_decay;
}

void AdamW::step(float lr) {
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) {
      throw ContractError("AdamW::step: parameter '" + p.name + "' has no gradient");
    }
  }
  ++state_.step;
  const auto t = static_cast<double>(state_.step);
  const float bc1 = 1.0f - static_cast<float>(std::pow(config_.beta1, t));
  const float bc2 = 1.0f - static_cast<float>(std::pow(config_.beta2, t));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor w = params_[k].tensor;
    auto data = w.data();
    auto grad = std::as_const(w).grad();
    auto& m = state_.first_moment[k];
    auto& v = state_.second_moment[k];
    for (std::size_t i = 0; i < data.size(); ++i) {
      const float g = grad[i];
      m[i] = config_.beta1 * m[i] + (1.0f - config_.beta1) * g;
      v[i] = config_.beta2 * v[i] + (1.0f - config_.beta2) * g * g;
      const float m_hat = m[i] / bc1;
      const float v_hat = v[i] / bc2;
      data[i] -= lr * config_.weight_decay * data[i];
      data[i] -= lr * m_hat / (std::sqrt(v_hat) + config_.eps);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

std::vector<std::string> AdamW::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.name);
  return out;
}

float cosine_lr(std::int64_t step, std::int64_t total_steps, float base_lr) {
  if (total_steps <= 0) throw ContractError("cosine_lr: total_steps must be positive");
  if (step < 0) throw ContractError("cosine_lr: negative step");
  step = std::min(step, total_steps);
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return static_cast<float>(base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * frac)));
}

}  // namespace ipn
