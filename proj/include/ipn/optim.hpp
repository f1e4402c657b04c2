// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ipn/tensor.hpp"

namespace ipn {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

struct AdamWConfig {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.01f;
};

struct OptimizerState {
  std::vector<std::vector<float>> first_moment;
  std::vector<std::vector<float>> second_moment;
  std::int64_t step = 0;
  float base_lr = 1e-4f;
  float weight_decay = 0.01f;
};

/// AdamW with decoupled weight decay. The parameter list doubles as the
/// trainable-set registry: only tracked tensors may be registered, and the
/// registered names are the audit trail for the freezing rules.
class AdamW {
 public:
  AdamW(std::vector<NamedParam> params, AdamWConfig config = {}, float base_lr = 1e-4f);

  /// One update at learning rate `lr`. Gradients are read, not cleared.
  void step(float lr);
  void zero_grad();

  std::vector<std::string> names() const;
  const std::vector<NamedParam>& params() const { return params_; }
  const OptimizerState& state() const { return state_; }
  const AdamWConfig& config() const { return config_; }

 private:
  std::vector<NamedParam> params_;
  AdamWConfig config_;
  OptimizerState state_;
};

/// base_lr * 0.5 * (1 + cos(pi * step / total_steps)); steps past the end clamp to 0.
float cosine_lr(std::int64_t step, std::int64_t total_steps, float base_lr);

}  // namespace ipn
