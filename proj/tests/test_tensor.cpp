// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "doctest.h"
#include "ipn/gradcheck.hpp"
#include "ipn/optim.hpp"
#include "ipn/tensor.hpp"

using namespace ipn;

namespace {

using UnaryOp = std::function<Tensor64(const Tensor64&)>;

// Checks d sum(w * op(x)) / dx against central differences; the random
// weights w keep the loss from being symmetric in the outputs.
double check_unary(const UnaryOp& op, Shape shape, std::mt19937_64& rng) {
  Tensor64 x = Tensor64::randn(shape, rng, 1.0, true);
  Tensor64 probe = op(x.detach());
  Tensor64 w = Tensor64::randn(probe.shape(), rng, 1.0);
  auto loss_of = [&](const Tensor64& in) { return sum(mul(op(in), w)); };
  backward(loss_of(x));
  Tensor64 numeric = finite_diff_grad([&] { return loss_of(x).item(); }, x);
  return max_relative_error(x.grad(), numeric.data());
}

std::size_t rand_dim(std::mt19937_64& rng) { return 1 + rng() % 16; }

}  // namespace

TEST_CASE("softmax of a constant row is uniform") {
  Tensor s = softmax(Tensor::from_data({3}, {0, 0, 0}));
  for (float v : s.data()) CHECK(v == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("gradient of x*x at 3 is 6") {
  Tensor x = Tensor::from_data({1}, {3.0f}, true);
  backward(sum(mul(x, x)));
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("layer norm of a constant vector is zero before the affine terms") {
  Tensor x = Tensor::full({1, 8}, 2.5f);
  Tensor gamma = Tensor::full({8}, 3.0f);
  Tensor beta = Tensor::zeros({8});
  Tensor y = layer_norm(x, gamma, beta);
  for (float v : y.data()) CHECK(v == 0.0f);
}

TEST_CASE("primitive gradients match central differences in 64-bit") {
  std::mt19937_64 rng(11);
  const double tol = 1e-4;
  for (int trial = 0; trial < 4; ++trial) {
    const std::size_t m = rand_dim(rng), k = rand_dim(rng), n = rand_dim(rng);
    CAPTURE(m);
    CAPTURE(k);
    CAPTURE(n);
    Tensor64 rhs = Tensor64::randn({k, n}, rng, 1.0);
    Tensor64 row = Tensor64::randn({k}, rng, 1.0);
    Tensor64 full_b = Tensor64::randn({m, k}, rng, 1.0);
    Tensor64 gamma = Tensor64::randn({k}, rng, 1.0);
    Tensor64 beta = Tensor64::randn({k}, rng, 1.0);
    std::vector<TokenId> targets(m);
    for (auto& t : targets) t = static_cast<TokenId>(rng() % k);

    CHECK(check_unary([&](const Tensor64& x) { return matmul(x, rhs); }, {m, k}, rng) < tol);
    CHECK(check_unary([&](const Tensor64& x) { return matmul(full_b, x); }, {k, n}, rng) < tol);
    CHECK(check_unary([&](const Tensor64& x) { return transpose(x); }, {m, k}, rng) < tol);
    CHECK(check_unary([&](const Tensor64& x) { return add(x, row); }, {m, k}, rng) < tol);
    CHECK(check_unary([&](const Tensor64& x) { return add(full_b, x); }, {k}, rng) < tol);
    CHECK(check_unary([&](const Tensor64& x) { return sub(full_b, x); }, {m, k}, rng) < tol);
    CHECK(check_unary([&](const Tensor64& x) { return mul(x, x); }, {m, k}, rng) < tol);
    CHECK(check_unary([&](const Tensor64& x) { return scale(x, 0.37); }, {m, k}, rng) < tol);
    CHECK(check_unary([&](const Tensor64& x) { return tanh(x); }, {m, k}, rng) < tol);
    CHECK(check_unary([&](const Tensor64& x) { return gelu(x); }, {m, k}, rng) < tol);
    CHECK(check_unary([&](const Tensor64& x) { return softmax(x); }, {m, k}, rng) < tol);
    CHECK(check_unary([&](const Tensor64& x) { return softmax(causal_mask(x)); }, {m, m}, rng) <
          tol);
    CHECK(check_unary([&](const Tensor64& x) { return layer_norm(x, gamma, beta); }, {m, k},
                      rng) < tol);
    CHECK(check_unary([&](const Tensor64& g) { return layer_norm(full_b, g, beta); }, {k}, rng) <
          tol);
    CHECK(check_unary(
              [&](const Tensor64& x) {
                std::vector<TokenId> ids(m);
                for (std::size_t i = 0; i < m; ++i) ids[i] = static_cast<TokenId>((i * 7) % k);
                return embedding(x, std::span<const TokenId>(ids));
              },
              {k, n}, rng) < tol);
    CHECK(check_unary([&](const Tensor64& x) { return concat_rows<double>({x, full_b, x}); },
                      {m, k}, rng) < tol);
    CHECK(check_unary([&](const Tensor64& x) { return concat_cols<double>({full_b, x}); },
                      {m, n}, rng) < tol);
    CHECK(check_unary([&](const Tensor64& x) { return slice_rows(x, m / 2, m); }, {m, k}, rng) <
          tol);
    CHECK(check_unary([&](const Tensor64& x) { return slice_cols(x, 0, (k + 1) / 2); }, {m, k},
                      rng) < tol);
    CHECK(check_unary([&](const Tensor64& x) { return reshape(x, {k, m}); }, {m, k}, rng) < tol);
    CHECK(check_unary([&](const Tensor64& x) { return sum(x); }, {m, k}, rng) < tol);
    CHECK(check_unary([&](const Tensor64& x) { return mean(x); }, {m, k}, rng) < tol);
    CHECK(check_unary([&](const Tensor64& x) { return sum_rows(x); }, {m, k}, rng) < tol);
    CHECK(check_unary([&](const Tensor64& x) { return mean_rows(x); }, {m, k}, rng) < tol);
    CHECK(check_unary([&](const Tensor64& x) { return l2_normalize_rows(x); }, {m, k}, rng) <
          tol);
    CHECK(check_unary(
              [&](const Tensor64& x) {
                return cross_entropy(x, std::span<const TokenId>(targets));
              },
              {m, k}, rng) < tol);
  }
}

TEST_CASE("softmax rows sum to one with entries in (0,1)") {
  std::mt19937_64 rng(3);
  Tensor x = Tensor::randn({9, 13}, rng, 4.0);
  Tensor s = softmax(x);
  for (std::size_t r = 0; r < 9; ++r) {
    double total = 0.0;
    for (std::size_t c = 0; c < 13; ++c) {
      const float v = s.at(r, c);
      CHECK(v > 0.0f);
      CHECK(v < 1.0f);
      total += v;
    }
    CHECK(std::abs(total - 1.0) <= 1e-6);
  }
}

TEST_CASE("cross entropy of a scaled one-hot logit decreases toward zero") {
  const std::vector<TokenId> target{2};
  double previous = 1e9;
  for (float s : {0.5f, 1.0f, 2.0f, 4.0f, 8.0f, 16.0f, 32.0f}) {
    Tensor logits = Tensor::from_data({1, 5}, {0, 0, s, 0, 0});
    const double loss = cross_entropy(logits, std::span<const TokenId>(target)).item();
    CHECK(loss < previous);
    previous = loss;
  }
  CHECK(previous < 1e-6);
}

TEST_CASE("dimension errors name the op and both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 5});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string what = e.what();
    CHECK(what.find("matmul") != std::string::npos);
    CHECK(what.find("[2,3]") != std::string::npos);
    CHECK(what.find("[4,5]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, b), DimensionError);
}

TEST_CASE("backward contract") {
  SUBCASE("non-scalar loss is rejected") {
    Tensor x = Tensor::zeros({2}, true);
    CHECK_THROWS_AS(backward(scale(x, 2.0f)), ContractError);
  }
  SUBCASE("frozen tensors get no gradient buffer but still pass gradients") {
    Tensor w = Tensor::from_data({2, 2}, {1, 2, 3, 4});
    Tensor x = Tensor::from_data({1, 2}, {1, -1}, true);
    backward(sum(matmul(x, w)));
    CHECK_FALSE(w.has_grad());
    CHECK(x.grad()[0] == doctest::Approx(3.0));
    CHECK(x.grad()[1] == doctest::Approx(7.0));
  }
  SUBCASE("two backward calls accumulate") {
    Tensor x = Tensor::from_data({1}, {2.0f}, true);
    backward(sum(mul(x, x)));
    backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(8.0));
  }
  SUBCASE("sum(W x) gives the outer-product gradient") {
    std::mt19937_64 rng(5);
    Tensor64 w = Tensor64::randn({4, 3}, rng, 1.0, true);
    Tensor64 x = Tensor64::randn({3, 1}, rng, 1.0);
    backward(sum(matmul(w, x)));
    Tensor64 numeric = finite_diff_grad([&] { return sum(matmul(w, x)).item(); }, w);
    CHECK(max_relative_error(w.grad(), numeric.data()) < 1e-4);
    for (std::size_t r = 0; r < 4; ++r) {
      for (std::size_t c = 0; c < 3; ++c) CHECK(w.grad()[r * 3 + c] == doctest::Approx(x.at(c)));
    }
  }
  SUBCASE("grad buffer exists iff requires_grad") {
    Tensor x = Tensor::zeros({3});
    CHECK_FALSE(x.has_grad());
    x.set_requires_grad(true);
    CHECK(x.has_grad());
    x.set_requires_grad(false);
    CHECK_FALSE(x.has_grad());
  }
}

TEST_CASE("finite differences") {
  Tensor64 x = Tensor64::from_data({1}, {2.0});
  Tensor64 g = finite_diff_grad([&] { return x.item() * x.item(); }, x);
  CHECK(std::abs(g.item() - 4.0) <= 1e-8);
  Tensor64 z = finite_diff_grad([] { return 7.0; }, x);
  CHECK(z.item() == 0.0);
  CHECK(x.item() == 2.0);
}

TEST_CASE("AdamW single step against a hand computation") {
  const float lr = 1e-3f;
  Tensor w = Tensor::from_data({3}, {1.0f, -2.0f, 0.5f}, true);
  const std::vector<float> g{0.3f, -0.1f, 2.0f};
  std::copy(g.begin(), g.end(), w.grad().begin());
  AdamW opt({{"w", w}});
  opt.step(lr);
  const std::vector<double> w0{1.0, -2.0, 0.5};
  for (std::size_t i = 0; i < 3; ++i) {
    // m_hat = g, v_hat = g^2 after bias correction at t = 1.
    const double m_hat = (0.1 * g[i]) / (1.0 - 0.9);
    const double v_hat = (0.001 * g[i] * g[i]) / (1.0 - 0.999);
    const double expected = w0[i] - lr * 0.01 * w0[i] - lr * m_hat / (std::sqrt(v_hat) + 1e-8);
    CHECK(w.data()[i] == doctest::Approx(expected).epsilon(1e-6));
  }
  CHECK(opt.state().step == 1);
  CHECK(w.grad()[0] == doctest::Approx(0.3));
  opt.step(lr);
  CHECK(opt.state().step == 2);
  CHECK(opt.state().first_moment[0].size() == 3);
}

TEST_CASE("AdamW with zero gradient") {
  SUBCASE("and no weight decay leaves the parameter unchanged") {
    Tensor w = Tensor::from_data({2}, {1.5f, -0.5f}, true);
    AdamW opt({{"w", w}}, AdamWConfig{.weight_decay = 0.0f});
    opt.step(1e-2f);
    CHECK(w.data()[0] == 1.5f);
    CHECK(w.data()[1] == -0.5f);
  }
  SUBCASE("only applies the decoupled decay") {
    Tensor w = Tensor::from_data({1}, {2.0f}, true);
    AdamW opt({{"w", w}});
    opt.step(0.1f);
    CHECK(w.data()[0] == doctest::Approx(2.0 * (1.0 - 0.1 * 0.01)));
  }
}

TEST_CASE("AdamW registry rejects frozen and duplicate parameters") {
  Tensor frozen = Tensor::zeros({2});
  Tensor live = Tensor::zeros({2}, true);
  CHECK_THROWS_WITH_AS(AdamW({{"frozen.w", frozen}}), doctest::Contains("frozen.w"),
                       ContractError);
  CHECK_THROWS_AS(AdamW({{"a", live}, {"a", live}}), ContractError);
}

TEST_CASE("AdamW step without a gradient names the parameter") {
  Tensor w = Tensor::zeros({2}, true);
  AdamW opt({{"ipn.w_out", w}});
  w.set_requires_grad(false);
  CHECK_THROWS_WITH_AS(opt.step(1e-3f), doctest::Contains("ipn.w_out"), ContractError);
}

TEST_CASE("cosine schedule") {
  CHECK(cosine_lr(0, 100, 1e-4f) == doctest::Approx(1e-4));
  CHECK(cosine_lr(100, 100, 1e-4f) == doctest::Approx(0.0));
  CHECK(cosine_lr(50, 100, 1e-4f) == doctest::Approx(5e-5));
  CHECK(cosine_lr(250, 100, 1e-4f) == cosine_lr(100, 100, 1e-4f));
  float previous = cosine_lr(0, 37, 1.0f);
  for (int s = 1; s <= 37; ++s) {
    const float cur = cosine_lr(s, 37, 1.0f);
    CHECK(cur <= previous);
    previous = cur;
  }
  CHECK_THROWS_AS(cosine_lr(0, 0, 1.0f), ContractError);
}

namespace {

// Attention composed from the unfused primitives, one segment at a time.
Tensor64 reference_attention(const Tensor64& qkv, const std::vector<std::size_t>& segs,
                             std::size_t heads, bool causal) {
  const std::size_t d = qkv.dim(1) / 3, hd = d / heads;
  std::vector<Tensor64> seg_out;
  std::size_t row0 = 0;
  for (auto s : segs) {
    Tensor64 rows = slice_rows(qkv, row0, row0 + s);
    std::vector<Tensor64> head_out;
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor64 q = slice_cols(rows, h * hd, (h + 1) * hd);
      Tensor64 k = slice_cols(rows, d + h * hd, d + (h + 1) * hd);
      Tensor64 v = slice_cols(rows, 2 * d + h * hd, 2 * d + (h + 1) * hd);
      Tensor64 scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(double(hd)));
      if (causal) scores = causal_mask(scores);
      head_out.push_back(matmul(softmax(scores), v));
    }
    seg_out.push_back(concat_cols(head_out));
    row0 += s;
  }
  return concat_rows(seg_out);
}

}  // namespace

TEST_CASE("fused attention matches the composed primitives and finite differences") {
  std::mt19937_64 rng(21);
  const std::vector<std::size_t> segs{3, 1, 5};
  for (bool causal : {true, false}) {
    CAPTURE(causal);
    Tensor64 x = Tensor64::randn({9, 12}, rng, 1.0);
    Tensor64 fused = attention(x, std::span<const std::size_t>(segs), 2, causal);
    Tensor64 ref = reference_attention(x, segs, 2, causal);
    for (std::size_t i = 0; i < fused.numel(); ++i) {
      CHECK(fused.data()[i] == doctest::Approx(ref.data()[i]).epsilon(1e-12));
    }
    const double err = check_unary(
        [&](const Tensor64& in) {
          return attention(in, std::span<const std::size_t>(segs), 2, causal);
        },
        {9, 12}, rng);
    CHECK(err < 1e-4);
  }
  CHECK_THROWS_AS(attention(Tensor64::zeros({4, 12}), std::span<const std::size_t>(segs), 2, true),
                  DimensionError);
}

TEST_CASE("weighted cross entropy gradient") {
  std::mt19937_64 rng(8);
  const std::vector<TokenId> targets{1, 0, 3};
  const std::vector<double> weights{0.5, 0.25, 2.0};
  const double err = check_unary(
      [&](const Tensor64& x) {
        return weighted_cross_entropy(x, std::span<const TokenId>(targets),
                                      std::span<const double>(weights));
      },
      {3, 4}, rng);
  CHECK(err < 1e-4);
}
