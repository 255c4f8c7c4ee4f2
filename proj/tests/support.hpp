#pragma once

// Shared test helpers: central-difference gradient checks and a tiny
// simulated dataset with its feature context.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "muse/features.hpp"
#include "muse/numcore.hpp"
#include "muse/simgen.hpp"

namespace muse::testing {

// Largest |analytic - numeric| over the largest magnitude of either, so the
// error is relative to the gradient's own scale. `floor` keeps inputs whose
// true gradient is zero from dividing pure rounding noise by nothing.
inline double scaled_error(const std::vector<double>& analytic, const std::vector<double>& numeric,
                           double floor = 1e-8) {
  double diff = 0.0, scale = floor;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  return diff / scale;
}

using Builder = std::function<nc::Var(nc::Graph&, const std::vector<nc::Var>&)>;

// Checks d(sum(out * R))/d(inputs) for a fixed random R against central
// differences with step h. Returns the worst scaled error over all inputs.
inline double check_leaf_gradients(std::vector<nc::Tensor> inputs, const Builder& build, std::uint64_t seed,
                                   double h = 1e-6, const nc::ParamStore* params = nullptr) {
  nc::Rng rng(seed);
  nc::Tensor projection;
  auto loss_of = [&](const std::vector<nc::Tensor>& xs, nc::Graph& g, std::vector<nc::Var>& vars) {
    vars.clear();
    for (const auto& x : xs) vars.push_back(g.leaf(x));
    nc::Var out = build(g, vars);
    if (projection.empty()) {
      projection = nc::normal_tensor(g.value(out).shape(), 1.0, rng);
    }
    return nc::sum(g, nc::mul(g, out, g.constant(projection)));
  };
  nc::Graph g(params);
  std::vector<nc::Var> vars;
  nc::Var loss = loss_of(inputs, g, vars);
  g.backward(loss);
  double overall = 0.0;
  for (const auto& v : vars) {
    for (double x : g.grad(v).values()) overall = std::max(overall, std::abs(x));
  }
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    std::vector<double> analytic(g.grad(vars[k]).values().begin(), g.grad(vars[k]).values().end());
    std::vector<double> numeric(inputs[k].size());
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      auto xs = inputs;
      xs[k][i] += h;
      nc::Graph gp(params);
      std::vector<nc::Var> vp;
      const double up = gp.value(loss_of(xs, gp, vp))[0];
      xs[k][i] -= 2 * h;
      nc::Graph gm(params);
      const double down = gm.value(loss_of(xs, gm, vp))[0];
      numeric[i] = (up - down) / (2 * h);
    }
    worst = std::max(worst, scaled_error(analytic, numeric, std::max(1e-8, 1e-4 * overall)));
  }
  return worst;
}

inline nc::Tensor random_tensor(nc::Shape shape, nc::Rng& rng, double sd = 1.0) {
  return nc::normal_tensor(std::move(shape), sd, rng);
}

struct TinyWorld {
  SimDataset data;
  FeatureContext ctx;
  std::vector<UserHistory> users;
};

inline TinyWorld tiny_world(std::uint64_t seed = 7, int n_users = 12) {
  SimConfig cfg;
  cfg.n_users = n_users;
  cfg.n_questions = 40;
  cfg.n_lectures = 8;
  cfg.mean_interactions = 40;
  cfg.min_interactions = 12;
  cfg.lecture_prob = 0.15;
  cfg.seed = seed;
  TinyWorld w;
  w.data = generate(cfg);
  w.ctx.questions = w.data.questions;
  w.ctx.lectures = w.data.lectures;
  w.ctx.content = ContentStats::build(w.data.rows, w.ctx.questions);
  w.ctx.tag_buckets = build_tag_buckets(w.data.rows, w.ctx.lectures);
  for (auto& [id, h] : group_by_user(w.data.rows)) w.users.push_back(std::move(h));
  return w;
}

}  // namespace muse::testing
