#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "muse/error.hpp"
#include "muse/metrics.hpp"

using namespace muse;

namespace {

double pair_count_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double favorable = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      pairs += 1.0;
      favorable += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  }
  return favorable / pairs;
}

}  // namespace

TEST_CASE("auc hand cases") {
  CHECK(roc_auc(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0}) == 1.0);
  CHECK(roc_auc(std::vector<double>{0.1, 0.9}, std::vector<int>{1, 0}) == 0.0);
  CHECK(roc_auc(std::vector<double>{0.3, 0.3, 0.3, 0.3}, std::vector<int>{1, 0, 0, 1}) == 0.5);
  // Positives 0.5 and 0.8 against negatives 0.2 and 0.5: 1 + 0.5 + 1 + 1 of 4 pairs.
  const std::vector<double> s{0.2, 0.5, 0.5, 0.8};
  const std::vector<int> y{0, 1, 0, 1};
  CHECK(roc_auc(s, y) == 0.875);
  CHECK(pair_count_auc(s, y) == 0.875);
}

TEST_CASE("auc rejects single-class and mismatched input") {
  CHECK_THROWS_AS(roc_auc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), Error);
  CHECK_THROWS_AS(roc_auc(std::vector<double>{0.1}, std::vector<int>{1, 0}), Error);
  CHECK_THROWS_AS(roc_auc(std::vector<double>{}, std::vector<int>{}), Error);
}

TEST_CASE("auc agrees with pair counting on random tied instances") {
  std::mt19937_64 rng(2024);
  for (int inst = 0; inst < 200; ++inst) {
    const int n = 2 + static_cast<int>(rng() % 199);
    const int levels = 1 + static_cast<int>(rng() % 12);  // few levels force ties
    std::vector<double> s(static_cast<std::size_t>(n));
    std::vector<int> y(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      s[static_cast<std::size_t>(i)] = static_cast<double>(rng() % static_cast<unsigned>(levels)) / levels;
      y[static_cast<std::size_t>(i)] = static_cast<int>(rng() % 2);
    }
    y[0] = 0;
    y[1] = 1;
    const double auc = roc_auc(s, y);
    CHECK(std::abs(auc - pair_count_auc(s, y)) <= 1e-12);

    std::vector<int> flipped(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) flipped[i] = 1 - y[i];
    CHECK(std::abs(auc - (1.0 - roc_auc(s, flipped))) <= 1e-15);

    std::vector<double> t(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) t[i] = std::exp(3.0 * s[i]) - 7.0;
    CHECK(roc_auc(t, y) == auc);
  }
}

TEST_CASE("logloss and accuracy") {
  const std::vector<double> half(6, 0.5);
  const std::vector<int> y{1, 0, 1, 1, 0, 0};
  CHECK(logloss(half, y) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(accuracy(half, y) == doctest::Approx(0.5));  // 0.5 counts as positive
  const std::vector<double> perfect{1, 0, 1, 1, 0, 0};
  CHECK(logloss(perfect, y) == doctest::Approx(-std::log1p(-1e-7)).epsilon(1e-6));
  CHECK(accuracy(perfect, y) == 1.0);

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  std::vector<double> p(300);
  std::vector<int> labels(300);
  double expect = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = u(rng);
    labels[i] = u(rng) < p[i];
    expect -= labels[i] ? std::log(p[i]) : std::log(1 - p[i]);
  }
  CHECK(logloss(p, labels) == doctest::Approx(expect / 300).epsilon(1e-12));

  const EvalReport r = evaluate(p, labels);
  CHECK(r.n_positive + r.n_negative == 300);
  CHECK(r.auc == roc_auc(p, labels));
  const std::string text = format_report(r, "local.");
  CHECK(text.find("local.auc = ") != std::string::npos);
  CHECK(text.find("local.n_negative = ") != std::string::npos);
}
