#include <cmath>
#include <limits>

#include "doctest.h"
#include "muse/error.hpp"
#include "muse/numcore.hpp"
#include "support.hpp"

using namespace muse;
using namespace muse::nc;
using muse::testing::check_leaf_gradients;
using muse::testing::random_tensor;

namespace {

constexpr double kOpTol = 1e-4;
const std::uint64_t kSeeds[] = {1, 2, 3, 4, 5};

// Keeps values away from the kink of relu.
Tensor away_from_zero(Shape s, Rng& rng) {
  Tensor t = random_tensor(std::move(s), rng);
  for (auto& v : t.values()) v += v >= 0 ? 0.1 : -0.1;
  return t;
}

double naive_sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("tensor construction checks shapes") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), Error);
  Tensor m = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  CHECK(m.at(1, 2) == 6);
  CHECK(m.rows() == 2);
  CHECK(Tensor::vector({1, 2}).rows() == 1);
}

TEST_CASE("param store rejects duplicates and unknown names") {
  ParamStore ps;
  ps.add("a", Tensor({2}));
  CHECK_THROWS_AS(ps.add("a", Tensor({2})), Error);
  CHECK_THROWS_AS(ps.index_of("b"), Error);
  CHECK(ps.total_elements() == 2);
}

TEST_CASE("matmul hand case and identity") {
  Graph g(nullptr);
  const Var a = g.constant(Tensor({2, 2}, {1, 2, 3, 4}));
  const Var b = g.constant(Tensor({2, 2}, {5, 6, 7, 8}));
  CHECK(g.value(matmul(g, a, b)) == Tensor({2, 2}, {19, 22, 43, 50}));
  const Var eye = g.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  CHECK(g.value(matmul(g, eye, a)) == g.value(a));
}

TEST_CASE("elementwise and linear ops match finite differences") {
  for (auto seed : kSeeds) {
    Rng rng(seed);
    Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
    CHECK(check_leaf_gradients({a, b}, [](Graph& g, const std::vector<Var>& v) { return add(g, v[0], v[1]); }, seed) < kOpTol);
    CHECK(check_leaf_gradients({a, b}, [](Graph& g, const std::vector<Var>& v) { return sub(g, v[0], v[1]); }, seed) < kOpTol);
    CHECK(check_leaf_gradients({a, b}, [](Graph& g, const std::vector<Var>& v) { return mul(g, v[0], v[1]); }, seed) < kOpTol);
    CHECK(check_leaf_gradients({a}, [](Graph& g, const std::vector<Var>& v) { return scale(g, v[0], -2.5); }, seed) < kOpTol);
    Tensor bias = random_tensor({4}, rng);
    CHECK(check_leaf_gradients({a, bias}, [](Graph& g, const std::vector<Var>& v) { return add_bias(g, v[0], v[1]); },
                               seed) < kOpTol);
    Tensor w = random_tensor({4, 5}, rng), wb = random_tensor({5}, rng);
    CHECK(check_leaf_gradients({a, w}, [](Graph& g, const std::vector<Var>& v) { return matmul(g, v[0], v[1]); }, seed) <
          kOpTol);
    CHECK(check_leaf_gradients({a, w, wb},
                               [](Graph& g, const std::vector<Var>& v) { return linear(g, v[0], v[1], v[2]); }, seed) < kOpTol);
    Tensor row = random_tensor({4}, rng);
    CHECK(check_leaf_gradients({row, w}, [](Graph& g, const std::vector<Var>& v) { return matmul(g, v[0], v[1]); }, seed) <
          kOpTol);
  }
}

TEST_CASE("activations match finite differences and their closed forms") {
  for (auto seed : kSeeds) {
    Rng rng(seed);
    Tensor x = away_from_zero({4, 3}, rng);
    CHECK(check_leaf_gradients({x}, [](Graph& g, const std::vector<Var>& v) { return relu(g, v[0]); }, seed) < kOpTol);
    CHECK(check_leaf_gradients({x}, [](Graph& g, const std::vector<Var>& v) { return gelu(g, v[0]); }, seed) < kOpTol);
    CHECK(check_leaf_gradients({x}, [](Graph& g, const std::vector<Var>& v) { return sigmoid(g, v[0]); }, seed) < kOpTol);
    CHECK(check_leaf_gradients({x}, [](Graph& g, const std::vector<Var>& v) { return tanh_act(g, v[0]); }, seed) < kOpTol);
  }
  // GELU tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
  for (double x : {-30.0, -3.0, -0.5, 0.0, 0.7, 2.0, 25.0}) {
    const double expect = 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
    CHECK(gelu_value(x) == doctest::Approx(expect).epsilon(1e-12));
    const double h = 1e-6;
    CHECK(gelu_grad(x) == doctest::Approx((gelu_value(x + h) - gelu_value(x - h)) / (2 * h)).epsilon(1e-6));
  }
  CHECK(nc::sigmoid(800.0) == 1.0);
  CHECK(nc::sigmoid(-800.0) >= 0.0);
  CHECK(std::isfinite(nc::sigmoid(-800.0)));
}

TEST_CASE("softmax and layer norm match oracles and finite differences") {
  Rng rng(11);
  Tensor x = random_tensor({3, 5}, rng, 2.0);
  Graph g;
  const Tensor& y = g.value(softmax(g, g.constant(x)));
  for (std::size_t r = 0; r < 3; ++r) {
    double z = 0.0;
    for (std::size_t c = 0; c < 5; ++c) z += std::exp(x.at(r, c));
    for (std::size_t c = 0; c < 5; ++c) CHECK(y.at(r, c) == doctest::Approx(std::exp(x.at(r, c)) / z).epsilon(1e-12));
  }
  Tensor gain = random_tensor({5}, rng), bias = random_tensor({5}, rng);
  const Tensor& ln = g.value(layer_norm(g, g.constant(x), g.constant(gain), g.constant(bias)));
  for (std::size_t r = 0; r < 3; ++r) {
    double mu = 0.0, var = 0.0;
    for (std::size_t c = 0; c < 5; ++c) mu += x.at(r, c) / 5;
    for (std::size_t c = 0; c < 5; ++c) var += (x.at(r, c) - mu) * (x.at(r, c) - mu) / 5;
    for (std::size_t c = 0; c < 5; ++c) {
      const double expect = (x.at(r, c) - mu) / std::sqrt(var + 1e-5) * gain[c] + bias[c];
      CHECK(ln.at(r, c) == doctest::Approx(expect).epsilon(1e-12));
    }
  }
  for (auto seed : kSeeds) {
    Rng r2(seed);
    Tensor a = random_tensor({3, 6}, r2), ga = random_tensor({6}, r2), be = random_tensor({6}, r2);
    CHECK(check_leaf_gradients({a}, [](Graph& gg, const std::vector<Var>& v) { return softmax(gg, v[0]); }, seed) < kOpTol);
    CHECK(check_leaf_gradients({a, ga, be},
                               [](Graph& gg, const std::vector<Var>& v) { return layer_norm(gg, v[0], v[1], v[2]); },
                               seed) < kOpTol);
  }
}

TEST_CASE("lookups, concatenation and reshaping match finite differences") {
  for (auto seed : kSeeds) {
    Rng rng(seed);
    Tensor table = random_tensor({6, 4}, rng);
    const std::vector<int> ids{0, 3, 3, 5};
    CHECK(check_leaf_gradients({table}, [&](Graph& g, const std::vector<Var>& v) { return embedding(g, v[0], ids); },
                               seed) < kOpTol);
    const std::vector<std::vector<int>> bags{{1, 2}, {}, {5, 5, 0}};
    CHECK(check_leaf_gradients({table}, [&](Graph& g, const std::vector<Var>& v) { return embedding_mean(g, v[0], bags); },
                               seed) < kOpTol);
    Tensor xs = random_tensor({5}, rng), w = random_tensor({4}, rng);
    CHECK(check_leaf_gradients({xs, w}, [](Graph& g, const std::vector<Var>& v) { return continuous_embed(g, v[0], v[1]); },
                               seed) < kOpTol);
    Tensor a = random_tensor({3, 2}, rng), b = random_tensor({3, 4}, rng);
    CHECK(check_leaf_gradients({a, b},
                               [](Graph& g, const std::vector<Var>& v) {
                                 const Var parts[] = {v[0], v[1], v[0]};
                                 return concat_cols(g, parts);
                               },
                               seed) < kOpTol);
    CHECK(check_leaf_gradients({b}, [](Graph& g, const std::vector<Var>& v) { return slice_rows(g, v[0], 1, 3); }, seed) <
          kOpTol);
    CHECK(check_leaf_gradients({b}, [](Graph& g, const std::vector<Var>& v) { return reshape(g, v[0], {4, 3}); }, seed) <
          kOpTol);
    CHECK(check_leaf_gradients({b}, [](Graph& g, const std::vector<Var>& v) { return mean(g, v[0]); }, seed) < kOpTol);
  }
  Graph g;
  Var t = g.constant(Tensor({3, 2}));
  const int bad[] = {3};
  CHECK_THROWS_AS(embedding(g, t, bad), Error);
  const Var none[] = {t};
  CHECK_THROWS_AS(slice_rows(g, t, 2, 4), Error);
  CHECK(g.value(concat_cols(g, none)).shape() == Shape{3, 2});
}

TEST_CASE("dropout keeps the expected scale and a fixed mask per draw") {
  Rng rng(3);
  Tensor x = random_tensor({4, 5}, rng);
  for (auto seed : kSeeds) {
    CHECK(check_leaf_gradients({x},
                               [seed](Graph& g, const std::vector<Var>& v) {
                                 Rng r(seed);  // same mask on every evaluation
                                 return dropout(g, v[0], 0.3, &r);
                               },
                               seed) < kOpTol);
  }
  Graph g;
  Var v = g.constant(x);
  CHECK(dropout(g, v, 0.5, nullptr).id == v.id);
  Rng r(9);
  const Tensor& y = g.value(dropout(g, v, 0.25, &r));
  for (std::size_t i = 0; i < x.size(); ++i) CHECK((y[i] == 0.0 || y[i] == doctest::Approx(x[i] / 0.75)));
  CHECK_THROWS_AS(dropout(g, v, 1.0, &r), Error);
}

TEST_CASE("binary cross-entropy matches its formula and gradient") {
  const std::vector<double> labels{1, 0, 1, 0}, weights{1, 1, 0.5, 0};
  Tensor p = Tensor::vector({0.8, 0.3, 0.6, 0.9});
  Graph g;
  const double loss = g.value(bce_loss(g, g.constant(p), labels, weights))[0];
  const double expect = -std::log(0.8) - std::log(0.7) - 0.5 * std::log(0.6);
  CHECK(loss == doctest::Approx(expect).epsilon(1e-12));
  for (auto seed : kSeeds) {
    CHECK(check_leaf_gradients({p},
                               [&](Graph& gg, const std::vector<Var>& v) { return bce_loss(gg, v[0], labels, weights); },
                               seed, 1e-7) < kOpTol);
  }
  CHECK(bce(0.0, 1.0) == doctest::Approx(-std::log(kProbFloor)));
}

TEST_CASE("attention matches a direct per-head computation") {
  Rng rng(21);
  const std::size_t L = 4, d = 6, heads = 2, dh = 3;
  Tensor q = random_tensor({L, d}, rng), k = random_tensor({L, d}, rng), v = random_tensor({L, d}, rng);
  Tensor mask = causal_mask(L);
  Graph g;
  const Tensor& y = g.value(attention(g, g.constant(q), g.constant(k), g.constant(v), mask, heads));
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < L; ++i) {
      std::vector<double> s(L, -std::numeric_limits<double>::infinity());
      double mx = -1e300;
      for (std::size_t j = 0; j <= i; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += q.at(i, h * dh + c) * k.at(j, h * dh + c);
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) z += std::exp(s[j] - mx);
      for (std::size_t c = 0; c < dh; ++c) {
        double out = 0.0;
        for (std::size_t j = 0; j <= i; ++j) out += std::exp(s[j] - mx) / z * v.at(j, h * dh + c);
        CHECK(y.at(i, h * dh + c) == doctest::Approx(out).epsilon(1e-12));
      }
    }
  }
  for (auto seed : kSeeds) {
    Rng r2(seed);
    Tensor a = random_tensor({L, d}, r2), b = random_tensor({L, d}, r2), c = random_tensor({L, d}, r2);
    CHECK(check_leaf_gradients({a, b, c},
                               [&](Graph& gg, const std::vector<Var>& vs) {
                                 return attention(gg, vs[0], vs[1], vs[2], mask, heads);
                               },
                               seed) < kOpTol);
    std::vector<Tensor> ws;
    for (int i = 0; i < 4; ++i) {
      ws.push_back(random_tensor({d, d}, r2, 0.5));
      ws.push_back(random_tensor({d}, r2, 0.1));
    }
    std::vector<Tensor> inputs{a, b};
    inputs.insert(inputs.end(), ws.begin(), ws.end());
    CHECK(check_leaf_gradients(inputs,
                               [&](Graph& gg, const std::vector<Var>& vs) {
                                 AttentionWeights w{vs[2], vs[3], vs[4], vs[5], vs[6], vs[7], vs[8], vs[9]};
                                 return multi_head_attention(gg, vs[0], vs[1], w, mask, heads);
                               },
                               seed) < kOpTol);
  }
  Tensor all_masked(Shape{L, L}, -std::numeric_limits<double>::infinity());
  CHECK_THROWS_AS(attention(g, g.constant(q), g.constant(k), g.constant(v), all_masked, heads), Error);
}

TEST_CASE("gru cell matches the gate equations and finite differences") {
  Rng rng(5);
  const std::size_t din = 3, d = 4;
  Tensor x = random_tensor({din}, rng), h = random_tensor({d}, rng);
  Tensor w = random_tensor({din, 3 * d}, rng, 0.5), u = random_tensor({d, 3 * d}, rng, 0.5), b = random_tensor({3 * d}, rng, 0.1);
  Graph g;
  const Tensor& y = g.value(gru_cell(g, g.constant(x), g.constant(h), g.constant(w), g.constant(u), g.constant(b)));
  auto pre = [&](std::size_t col, bool reset_h, const std::vector<double>& r) {
    double s = b[col];
    for (std::size_t i = 0; i < din; ++i) s += x[i] * w.at(i, col);
    for (std::size_t i = 0; i < d; ++i) s += (reset_h ? r[i] * h[i] : h[i]) * u.at(i, col);
    return s;
  };
  std::vector<double> z(d), r(d);
  for (std::size_t j = 0; j < d; ++j) {
    z[j] = naive_sigmoid(pre(j, false, r));
    r[j] = naive_sigmoid(pre(d + j, false, r));
  }
  for (std::size_t j = 0; j < d; ++j) {
    const double c = std::tanh(pre(2 * d + j, true, r));
    CHECK(y[j] == doctest::Approx((1 - z[j]) * h[j] + z[j] * c).epsilon(1e-12));
  }
  for (auto seed : kSeeds) {
    Rng r2(seed);
    Tensor xs = random_tensor({5, din}, r2), h0 = random_tensor({d}, r2, 0.5);
    Tensor w2 = random_tensor({din, 3 * d}, r2, 0.5), u2 = random_tensor({d, 3 * d}, r2, 0.5), b2 = random_tensor({3 * d}, r2, 0.1);
    CHECK(check_leaf_gradients({x, h0, w2, u2, b2},
                               [](Graph& gg, const std::vector<Var>& v) { return gru_cell(gg, v[0], v[1], v[2], v[3], v[4]); },
                               seed) < kOpTol);
    const std::vector<std::uint8_t> active{1, 0, 1, 1, 0};
    CHECK(check_leaf_gradients({xs, h0, w2, u2, b2},
                               [&](Graph& gg, const std::vector<Var>& v) {
                                 return gru_sequence(gg, v[0], v[1], v[2], v[3], v[4], active);
                               },
                               seed) < kOpTol);
  }
}

TEST_CASE("gru sequence carries state through inactive steps") {
  Rng rng(8);
  const std::size_t din = 2, d = 3;
  Tensor xs = random_tensor({4, din}, rng), h0 = random_tensor({d}, rng);
  Tensor w = random_tensor({din, 3 * d}, rng), u = random_tensor({d, 3 * d}, rng), b = random_tensor({3 * d}, rng);
  const std::vector<std::uint8_t> active{1, 0, 0, 1};
  Graph g;
  const Tensor& hs = g.value(gru_sequence(g, g.constant(xs), g.constant(h0), g.constant(w), g.constant(u), g.constant(b), active));
  for (std::size_t c = 0; c < d; ++c) {
    CHECK(hs.at(1, c) == hs.at(0, c));
    CHECK(hs.at(2, c) == hs.at(0, c));
  }
  // Stepping the cell by hand gives the same last state.
  Var h = g.constant(h0);
  for (std::size_t t : {0u, 3u}) {
    h = gru_cell(g, slice_rows(g, g.constant(xs), t, t + 1), h, g.constant(w), g.constant(u), g.constant(b));
    h = reshape(g, h, {d});
  }
  for (std::size_t c = 0; c < d; ++c) CHECK(g.value(h)[c] == doctest::Approx(hs.at(3, c)).epsilon(1e-14));
}

TEST_CASE("parameter gradients go to the sink and accumulate across graphs") {
  ParamStore ps;
  ps.add("w", Tensor::vector({2.0, -1.0}));
  GradBuffer sink(ps);
  for (int rep = 0; rep < 2; ++rep) {
    Graph g(&ps);
    Var w = g.param("w");
    Var x = g.leaf(Tensor::vector({3.0, 4.0}));
    g.backward(sum(g, mul(g, w, x)), &sink);
    CHECK(g.grad(x)[0] == 2.0);
  }
  CHECK(sink[0][0] == 6.0);
  CHECK(sink[0][1] == 8.0);
  sink.scale(0.5);
  CHECK(sink.global_norm() == doctest::Approx(5.0));
  sink.zero();
  CHECK(sink.global_norm() == 0.0);
}

TEST_CASE("backward twice gives the same gradients") {
  Graph g;
  Var x = g.leaf(Tensor::vector({1.0, 2.0}));
  Var y = sum(g, mul(g, x, x));
  g.backward(y);
  const double first = g.grad(x)[1];
  g.backward(y);
  CHECK(g.grad(x)[1] == first);
  CHECK(first == 4.0);
}

TEST_CASE("causal mask is lower triangular") {
  Tensor m = causal_mask(3);
  CHECK(m.at(0, 0) == 0.0);
  CHECK(m.at(2, 1) == 0.0);
  CHECK(std::isinf(m.at(0, 2)));
}

TEST_CASE("initializers are seeded") {
  Rng a(4), b(4);
  CHECK(glorot(3, 5, a) == glorot(3, 5, b));
  Rng c(4);
  Tensor t = normal_tensor({2000}, 0.5, c);
  double s = 0.0, s2 = 0.0;
  for (double v : t.values()) {
    s += v;
    s2 += v * v;
  }
  CHECK(std::abs(s / 2000) < 0.05);
  CHECK(std::sqrt(s2 / 2000) == doctest::Approx(0.5).epsilon(0.08));
}
