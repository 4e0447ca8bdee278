#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "moedst/autodiff.hpp"
#include "moedst/tensor.hpp"
#include "oracles.hpp"

using namespace moedst;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data) v = rng.normal(0.0, scale);
  return t;
}

}  // namespace

TEST_CASE("tensor shape handling") {
  Tensor t({2, 3});
  CHECK(t.numel() == 6);
  CHECK_THROWS_AS(Tensor({2, 0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
}

TEST_CASE("matmul kernels agree with naive loops") {
  Rng rng(7);
  Tensor a = random_tensor({3, 5}, rng);
  Tensor b = random_tensor({5, 4}, rng);
  Tensor c = matmul_nn(a, b);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) {
      double acc = 0.0;
      for (int p = 0; p < 5; ++p) acc += a.at(i, p) * b.at(p, j);
      CHECK(c.at(i, j) == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("softmax rows: worked examples") {
  Tape tape;
  SUBCASE("symmetry") {
    NodeId x = tape.constant(Tensor({1, 2}, {1.0, 1.0}));
    const Tensor& y = tape.value(tape.softmax_rows(x));
    CHECK(y.data[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(y.data[1] == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("e^0 vs e^ln3") {
    NodeId x = tape.constant(Tensor({1, 2}, {0.0, std::log(3.0)}));
    const Tensor& y = tape.value(tape.softmax_rows(x));
    CHECK(y.data[0] == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(y.data[1] == doctest::Approx(0.75).epsilon(1e-12));
  }
  SUBCASE("shift invariance at large magnitude") {
    NodeId x = tape.constant(Tensor({1, 2}, {1000.0, 1000.0}));
    const Tensor& y = tape.value(tape.softmax_rows(x));
    CHECK(y.all_finite());
    CHECK(y.data[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(y.data[1] == doctest::Approx(0.5).epsilon(1e-12));
  }
  SUBCASE("rows sum to one") {
    Rng rng(3);
    NodeId x = tape.constant(random_tensor({5, 9}, rng, 10.0));
    const Tensor& y = tape.value(tape.softmax_rows(x));
    for (int i = 0; i < 5; ++i) {
      double s = 0.0;
      for (int j = 0; j < 9; ++j) {
        CHECK(y.at(i, j) >= 0.0);
        s += y.at(i, j);
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  SUBCASE("rank errors") {
    NodeId bad = tape.constant(Tensor({4}));
    CHECK_THROWS_AS(tape.softmax_rows(bad), std::invalid_argument);
  }
}

TEST_CASE("cross entropy: worked examples") {
  SUBCASE("peaked logits drive loss to zero") {
    Tape tape;
    NodeId logits = tape.constant(Tensor({1, 3}, {60.0, 0.0, 0.0}));
    double loss = tape.value(tape.cross_entropy(logits, {0})).data[0];
    CHECK(loss >= 0.0);
    CHECK(loss < 1e-12);
  }
  SUBCASE("uniform logits over 4 tokens give ln 4") {
    Tape tape;
    NodeId logits = tape.constant(Tensor({2, 4}, std::vector<double>(8, 0.7)));
    double loss = tape.value(tape.cross_entropy(logits, {3, 1})).data[0];
    CHECK(loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  SUBCASE("random logits match the scalar oracle") {
    Rng rng(91);
    Tensor logits = random_tensor({2, 5}, rng, 2.0);
    std::vector<std::vector<double>> rows = {
        {logits.at(0, 0), logits.at(0, 1), logits.at(0, 2), logits.at(0, 3), logits.at(0, 4)},
        {logits.at(1, 0), logits.at(1, 1), logits.at(1, 2), logits.at(1, 3), logits.at(1, 4)}};
    std::vector<int> targets = {4, 2};
    Tape tape;
    double loss = tape.value(tape.cross_entropy(tape.constant(logits), targets)).data[0];
    CHECK(loss == doctest::Approx(oracles::scalar_cross_entropy(rows, targets)).epsilon(1e-12));
  }
  SUBCASE("out-of-range target") {
    Tape tape;
    NodeId logits = tape.constant(Tensor({1, 3}));
    CHECK_THROWS_AS(tape.cross_entropy(logits, {3}), std::out_of_range);
  }
}

TEST_CASE("backward: softmax+cross-entropy analytic identity") {
  Rng rng(5);
  Tensor logits = random_tensor({1, 6}, rng, 1.5);
  Tape tape;
  NodeId z = tape.param(logits);
  NodeId loss = tape.cross_entropy(z, {2});
  tape.backward(loss);
  Tensor probs = Tape::softmax_rows_value(logits);
  const Tensor& g = tape.grad(z);
  for (int j = 0; j < 6; ++j) {
    double expected = probs.data[static_cast<size_t>(j)] - (j == 2 ? 1.0 : 0.0);
    CHECK(g.data[static_cast<size_t>(j)] == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("backward: non-scalar loss is a contract error") {
  Tape tape;
  NodeId x = tape.param(Tensor({2, 2}, {1, 2, 3, 4}));
  NodeId y = tape.gelu(x);
  CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("backward: loss constant in a parameter gives exactly zero gradient") {
  Tape tape;
  NodeId used = tape.param(Tensor({1, 3}, {0.3, -0.2, 0.9}));
  NodeId unused = tape.param(Tensor({2, 2}, {1, 2, 3, 4}));
  NodeId loss = tape.cross_entropy(used, {1});
  tape.backward(loss);
  for (double v : tape.grad(unused).data) CHECK(v == 0.0);
  (void)unused;
}

namespace {

// Small two-layer network used by several gradient tests:
// loss = CE(softmax-of(logits)), logits = (gelu(x W1 + b1) W2) after layernorm.
struct TwoLayerFixture {
  Tensor x, w1, b1, g1, beta1, w2;
  std::vector<int> targets;

  static TwoLayerFixture make(uint64_t seed) {
    Rng rng(seed);
    TwoLayerFixture f;
    f.x = random_tensor({3, 4}, rng);
    f.w1 = random_tensor({4, 6}, rng, 0.7);
    f.b1 = random_tensor({6}, rng, 0.3);
    f.g1 = random_tensor({6}, rng, 0.2);
    for (double& v : f.g1.data) v += 1.0;
    f.beta1 = random_tensor({6}, rng, 0.2);
    f.w2 = random_tensor({6, 5}, rng, 0.7);
    f.targets = {1, 4, 0};
    return f;
  }

  NodeId build(Tape& tape, std::vector<NodeId>* params_out) const {
    NodeId xn = tape.constant(x);
    NodeId w1n = tape.param(w1);
    NodeId b1n = tape.param(b1);
    NodeId g1n = tape.param(g1);
    NodeId beta1n = tape.param(beta1);
    NodeId w2n = tape.param(w2);
    NodeId h = tape.gelu(tape.add_row_bias(tape.matmul(xn, w1n), b1n));
    h = tape.layer_norm(h, g1n, beta1n);
    NodeId logits = tape.matmul(h, w2n);
    if (params_out) *params_out = {w1n, b1n, g1n, beta1n, w2n};
    return tape.cross_entropy(logits, targets);
  }

  std::vector<Tensor*> param_ptrs() { return {&w1, &b1, &g1, &beta1, &w2}; }

  double loss() const {
    Tape tape;
    return tape.value(build(tape, nullptr)).data[0];
  }

  std::vector<Tensor> grads() const {
    Tape tape;
    std::vector<NodeId> nodes;
    NodeId loss_node = build(tape, &nodes);
    tape.backward(loss_node);
    std::vector<Tensor> out;
    for (NodeId n : nodes) out.push_back(tape.grad(n));
    return out;
  }
};

}  // namespace

TEST_CASE("backward: two-layer network matches central finite differences everywhere") {
  TwoLayerFixture f = TwoLayerFixture::make(11);
  std::vector<Tensor> analytic = f.grads();
  auto params = f.param_ptrs();
  double h = 1e-4;
  for (size_t p = 0; p < params.size(); ++p) {
    for (size_t i = 0; i < params[p]->data.size(); ++i) {
      double diff =
          oracles::central_difference([&] { return f.loss(); }, &params[p]->data[i], h);
      double a = analytic[p].data[i];
      double rel = std::abs(a - diff) / (std::abs(a) + std::abs(diff) + 1e-12);
      CHECK(rel < 1e-3);
    }
  }
}

TEST_CASE("every primitive matches finite differences on randomized shapes") {
  // 20+ random (shape, seed) combinations across the primitive set
  for (uint64_t seed = 1; seed <= 24; ++seed) {
    Rng rng(seed * 131);
    int m = 1 + static_cast<int>(rng.next_below(4));
    int k = 1 + static_cast<int>(rng.next_below(4));
    int n = 2 + static_cast<int>(rng.next_below(4));
    Tensor a = random_tensor({m, k}, rng);
    Tensor b = random_tensor({k, n}, rng);
    Tensor c = random_tensor({m, n}, rng);
    Tensor bias = random_tensor({n}, rng);
    Tensor gain = random_tensor({n}, rng, 0.3);
    for (double& v : gain.data) v += 1.0;
    std::vector<int> ids;
    for (int i = 0; i < m; ++i) ids.push_back(static_cast<int>(rng.next_below(static_cast<uint64_t>(m))));
    std::vector<int> targets;
    for (int i = 0; i < m; ++i) targets.push_back(static_cast<int>(rng.next_below(static_cast<uint64_t>(n))));

    // chain exercising: embedding, matmul, matmul_nt, add, mul, scale,
    // add_row_bias, layer_norm, gelu, softmax_rows, slice/concat, CE
    auto build = [&](Tape& tape, std::vector<NodeId>* params_out) {
      NodeId an = tape.param(a);
      NodeId bn = tape.param(b);
      NodeId cn = tape.param(c);
      NodeId biasn = tape.param(bias);
      NodeId gainn = tape.param(gain);
      NodeId emb = tape.embedding(an, ids);                    // m x k
      NodeId h = tape.matmul(emb, bn);                         // m x n
      h = tape.add_row_bias(h, biasn);
      h = tape.add(h, cn);
      h = tape.mul(h, cn);
      h = tape.layer_norm(h, gainn, biasn);
      h = tape.gelu(tape.scale(h, 0.7));
      NodeId att = tape.softmax_rows(tape.scale(tape.matmul_nt(h, cn), 0.5));  // m x m
      NodeId mixed = tape.matmul(att, h);                                      // m x n
      int half = n / 2;
      std::vector<NodeId> parts = {tape.slice_cols(mixed, 0, half),
                                   tape.slice_cols(mixed, half, n - half)};
      NodeId re = tape.concat_cols(parts);
      if (params_out) *params_out = {an, bn, cn, biasn, gainn};
      return tape.cross_entropy(re, targets);
    };

    auto loss_fn = [&]() {
      Tape tape;
      return tape.value(build(tape, nullptr)).data[0];
    };

    auto grads_fn = [&]() {
      Tape tape;
      std::vector<NodeId> nodes;
      NodeId loss = build(tape, &nodes);
      tape.backward(loss);
      std::vector<Tensor> out;
      for (NodeId nid : nodes) out.push_back(tape.grad(nid));
      return out;
    };

    // finiteness of the whole chain
    CHECK(std::isfinite(loss_fn()));

    std::vector<Tensor*> params = {&a, &b, &c, &bias, &gain};
    double err = check_gradients(params, loss_fn, grads_fn,
                                 {1e-4, 6, seed});
    INFO("seed ", seed);
    CHECK(err < 1e-3);
  }
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(23);
  Tensor theta = random_tensor({2, 3}, rng);
  double alpha = 0.6, beta = -1.7;

  auto grads_of = [&](double ca, double cb) {
    Tape tape;
    NodeId t = tape.param(theta);
    NodeId l1 = tape.cross_entropy(t, {0, 2});
    NodeId l2 = tape.cross_entropy(tape.gelu(t), {1, 1});
    NodeId combo = tape.add(tape.scale(l1, ca), tape.scale(l2, cb));
    tape.backward(combo);
    return tape.grad(t);
  };

  Tensor g1 = grads_of(1.0, 0.0);
  Tensor g2 = grads_of(0.0, 1.0);
  Tensor gc = grads_of(alpha, beta);
  for (size_t i = 0; i < gc.data.size(); ++i)
    CHECK(gc.data[i] == doctest::Approx(alpha * g1.data[i] + beta * g2.data[i]).epsilon(1e-9));
}

TEST_CASE("check_gradients contract examples") {
  SUBCASE("linear map has near-zero error") {
    Tensor theta({4}, {0.5, -1.0, 2.0, 0.25});
    auto loss = [&] {
      double s = 0.0;
      for (double v : theta.data) s += v;
      return s;
    };
    auto grads = [&] { return std::vector<Tensor>{Tensor({4}, {1, 1, 1, 1})}; };
    std::vector<Tensor*> params = {&theta};
    CHECK(check_gradients(params, loss, grads) < 1e-8);
  }
  SUBCASE("zero parameters with quadratic loss: exact zero error") {
    Tensor theta({3});
    auto loss = [&] {
      double s = 0.0;
      for (double v : theta.data) s += v * v;
      return s;
    };
    auto grads = [&] { return std::vector<Tensor>{Tensor({3})}; };
    std::vector<Tensor*> params = {&theta};
    CHECK(check_gradients(params, loss, grads) == 0.0);
  }
}

TEST_CASE("gradients accumulate across repeated use of one node") {
  Tensor x({1, 2}, {0.5, -0.25});
  Tape tape;
  NodeId xn = tape.param(x);
  NodeId y = tape.mul(xn, xn);  // y = x^2 elementwise
  NodeId loss = tape.cross_entropy(y, {0});
  tape.backward(loss);
  auto loss_fn = [&] {
    Tape t2;
    NodeId a = t2.param(x);
    return t2.value(t2.cross_entropy(t2.mul(a, a), {0})).data[0];
  };
  for (size_t i = 0; i < x.data.size(); ++i) {
    double diff = oracles::central_difference(loss_fn, &x.data[i], 1e-5);
    CHECK(tape.grad(xn).data[i] == doctest::Approx(diff).epsilon(1e-5));
  }
}
