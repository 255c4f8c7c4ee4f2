#include "muse/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>

#include "muse/error.hpp"

namespace muse {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return splitmix(splitmix(splitmix(seed) ^ a) ^ b);
}

double uniform01(nc::Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Fisher-Yates with our own index draws so the permutation does not depend
// on the standard library's distribution implementation.
void shuffle(std::vector<std::size_t>& v, nc::Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(v[i - 1], v[j]);
  }
}

// Work for one batch split into contiguous chunks, one per thread. Each
// chunk owns a gradient buffer; buffers are reduced in chunk order.
struct ChunkResult {
  nc::GradBuffer grads;
  double loss = 0.0;
  std::size_t targets = 0;
};

template <typename Fn>
ChunkResult run_chunks(const nc::ParamStore& params, std::size_t n, int threads, Fn fn) {
  const std::size_t t = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1, std::max<std::size_t>(n, 1));
  std::vector<ChunkResult> parts(t);
  auto work = [&](std::size_t c) {
    parts[c].grads = nc::GradBuffer(params);
    const std::size_t begin = n * c / t, end = n * (c + 1) / t;
    for (std::size_t i = begin; i < end; ++i) fn(i, parts[c]);
  };
  if (t == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t c = 0; c < t; ++c) pool.emplace_back(work, c);
    for (auto& th : pool) th.join();
  }
  ChunkResult total = std::move(parts[0]);
  for (std::size_t c = 1; c < t; ++c) {
    total.grads.add(parts[c].grads);
    total.loss += parts[c].loss;
    total.targets += parts[c].targets;
  }
  return total;
}

void finish_step(const TrainConfig& config, const TrainHooks& hooks, const TrainLogEntry& entry, bool last) {
  if (hooks.on_step) hooks.on_step(entry);
  if (hooks.on_checkpoint &&
      (last || (config.checkpoint_every > 0 && entry.step % config.checkpoint_every == 0))) {
    hooks.on_checkpoint(entry.step);
  }
}

double squared_norm(const nc::Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v * v;
  return s;
}

}  // namespace

TrainConfig TrainConfig::desk() {
  TrainConfig c;
  c.lr_base = 0.002;
  c.batch = 16;
  c.warmup = 50;
  c.adv_extra_steps = 50;
  return c;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::Config, "training: " + what); };
  if (!(lr_base > 0.0) || !(adv_lr > 0.0)) fail("learning rates must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) fail("Adam betas must lie in (0,1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (weight_decay < 0.0) fail("weight_decay must be non-negative");
  if (batch < 1 || warmup < 1 || epochs < 1) fail("batch, warmup and epochs must be positive");
  if (ram_ratio < 0.0 || ram_ratio > 1.0) fail("ram_ratio must lie in [0,1]");
  if (adv_ascent_steps < 1 || adv_step_size < 0.0 || adv_epsilon < 0.0 || adv_extra_steps < 0) {
    fail("adversarial settings out of range");
  }
  if (threads < 1) fail("threads must be at least 1");
  if (checkpoint_every < 0) fail("checkpoint_every must be non-negative");
}

std::string checkpoint_name(const std::string& model, long step) {
  return model + "." + std::to_string(step) + ".ckpt";
}

void write_train_log(const std::filesystem::path& path, std::span<const TrainLogEntry> log) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out.precision(17);
  out << "step,lr,loss\n";
  for (const auto& e : log) out << e.step << ',' << e.lr << ',' << e.loss << '\n';
}

double noam_lr(long step, long warmup, int d_model, double lr_base) {
  if (step < 1) throw Error(ErrorKind::InvalidArgument, "noam_lr step must be >= 1, got " + std::to_string(step));
  if (warmup < 1 || d_model < 1) throw Error(ErrorKind::InvalidArgument, "noam_lr needs positive warmup and d_model");
  auto raw = [&](double s) {
    return std::pow(static_cast<double>(d_model), -0.5) *
           std::min(std::pow(s, -0.5), s * std::pow(static_cast<double>(warmup), -1.5));
  };
  if (step == warmup) return lr_base;
  return lr_base * raw(static_cast<double>(step)) / raw(static_cast<double>(warmup));
}

AdamState::AdamState(const nc::ParamStore& params) {
  for (const auto& p : params) {
    m.emplace_back(p.value.shape(), 0.0);
    v.emplace_back(p.value.shape(), 0.0);
  }
}

void adamw_update(nc::ParamStore& params, const nc::GradBuffer& grads, AdamState& state, double lr,
                  const AdamSettings& s) {
  if (grads.size() != params.size() || state.m.size() != params.size()) {
    throw Error(ErrorKind::ShapeMismatch, "optimizer state does not match the parameter store");
  }
  state.step += 1;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    nc::Tensor& theta = params.at(i).value;
    const nc::Tensor& g = grads[i];
    if (!g.same_shape(theta) || !state.m[i].same_shape(theta)) {
      throw Error(ErrorKind::ShapeMismatch, "gradient shape differs for " + params.at(i).name);
    }
    double* m = state.m[i].data();
    double* v = state.v[i].data();
    double* th = theta.data();
    for (std::size_t k = 0; k < theta.size(); ++k) {
      m[k] = s.beta1 * m[k] + (1.0 - s.beta1) * g[k];
      v[k] = s.beta2 * v[k] + (1.0 - s.beta2) * g[k] * g[k];
      const double mh = m[k] / c1, vh = v[k] / c2;
      th[k] -= lr * (mh / (std::sqrt(vh) + s.eps) + s.weight_decay * th[k]);
    }
  }
}

double clip_gradients(nc::GradBuffer& grads, double max_norm) {
  const double norm = grads.global_norm();
  if (max_norm > 0.0 && norm > max_norm) grads.scale(max_norm / norm);
  return norm;
}

RamResult apply_ram(const LocalFeatureFrame& frame, double ratio, nc::Rng& rng) {
  if (ratio < 0.0 || ratio > 1.0) throw Error(ErrorKind::InvalidArgument, "ram ratio must lie in [0,1]");
  RamResult r{frame, {}};
  for (std::size_t k = 0; k < frame.resp.size(); ++k) {
    const int token = frame.resp[k].response;
    if (!frame.valid[k] || (token != kWrong && token != kCorrect)) continue;
    // Draw for every candidate so the stream does not depend on the ratio.
    const double u = uniform01(rng);
    if (u < ratio) {
      r.frame.resp[k].response = kMask;
      r.masked.push_back(k);
    }
  }
  return r;
}

std::vector<TrainLogEntry> train_local(LocalModel& model, std::span<const LocalFeatureFrame> frames,
                                       const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  if (frames.empty()) throw Error(ErrorKind::EmptyDataset, "no training frames for the local model");
  const nc::ParamStore& params = model.params();
  AdamState opt(params);
  const AdamSettings settings{config.beta1, config.beta2, config.adam_eps, config.weight_decay};
  const auto batch = static_cast<std::size_t>(config.batch);
  const std::size_t per_epoch = (frames.size() + batch - 1) / batch;
  const long total_steps = static_cast<long>(per_epoch) * config.epochs;

  nc::Rng order_rng(stream_seed(config.seed, 0x6c6f63616cULL));
  std::vector<std::size_t> order(frames.size());
  std::vector<TrainLogEntry> log;
  long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    shuffle(order, order_rng);
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t begin = b * batch, end = std::min(frames.size(), begin + batch);
      ++step;
      ChunkResult r = run_chunks(params, end - begin, config.threads, [&](std::size_t i, ChunkResult& acc) {
        const std::size_t slot = begin + i;
        nc::Rng rng(stream_seed(config.seed, static_cast<std::uint64_t>(epoch) + 1, slot));
        const RamResult ram = apply_ram(frames[order[slot]], config.ram_ratio, rng);
        nc::Graph g(&params);
        LocalForwardOptions opt_fw;
        opt_fw.dropout_rng = &rng;
        const LocalForward fw = model.forward(g, ram.frame, opt_fw);
        if (fw.n_targets == 0) return;
        acc.loss += g.value(fw.loss)[0];
        acc.targets += fw.n_targets;
        g.backward(fw.loss, &acc.grads);
      });
      const double lr = noam_lr(step, config.warmup, model.config().d_model, config.lr_base);
      const double n = static_cast<double>(std::max<std::size_t>(r.targets, 1));
      r.grads.scale(1.0 / n);
      clip_gradients(r.grads, config.clip_norm);
      adamw_update(model.params(), r.grads, opt, lr, settings);
      log.push_back({step, lr, r.loss / n});
      finish_step(config, hooks, log.back(), step == total_steps);
    }
  }
  return log;
}

AdversarialResult adversarial_finetune(LocalModel& model, std::span<const LocalFeatureFrame> frames,
                                       const TrainConfig& config, long steps, const TrainHooks& hooks) {
  config.validate();
  if (frames.empty()) throw Error(ErrorKind::EmptyDataset, "no frames for adversarial fine-tuning");
  const nc::ParamStore& params = model.params();
  AdamState opt(params);
  const AdamSettings settings{config.beta1, config.beta2, config.adam_eps, config.weight_decay};
  const auto batch = static_cast<std::size_t>(config.batch);
  const auto K = static_cast<std::size_t>(config.adv_ascent_steps);
  const auto W = static_cast<std::size_t>(model.config().window);
  const auto d = static_cast<std::size_t>(model.config().d_model);

  nc::Rng order_rng(stream_seed(config.seed, 0x616476ULL));
  std::vector<std::size_t> order(frames.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle(order, order_rng);
  std::size_t cursor = 0;

  AdversarialResult result;
  for (long step = 1; step <= steps; ++step) {
    std::vector<std::size_t> picked;
    for (std::size_t i = 0; i < batch; ++i) {
      if (cursor == order.size()) {
        shuffle(order, order_rng);
        cursor = 0;
      }
      picked.push_back(order[cursor++]);
    }
    struct FrameStats {
      double clean = 0.0, ascent = 0.0, max_norm = 0.0;
      std::size_t targets = 0;
    };
    std::vector<FrameStats> fstats(picked.size());
    ChunkResult r = run_chunks(params, picked.size(), config.threads, [&](std::size_t i, ChunkResult& acc) {
      nc::Rng rng(stream_seed(config.seed, 0x616476ULL + static_cast<std::uint64_t>(step), i));
      const RamResult ram = apply_ram(frames[picked[i]], config.ram_ratio, rng);
      std::array<nc::Tensor, 3> delta{nc::Tensor({W, d}), nc::Tensor({W, d}), nc::Tensor({W, d})};
      FrameStats& fs = fstats[i];
      for (std::size_t k = 0; k < K; ++k) {
        nc::Graph g(&params);
        StreamPerturbation pert{g.leaf(delta[0]), g.leaf(delta[1]), g.leaf(delta[2])};
        LocalForwardOptions opt_fw;
        opt_fw.dropout_rng = &rng;
        opt_fw.perturbation = &pert;
        const LocalForward fw = model.forward(g, ram.frame, opt_fw);
        if (fw.n_targets == 0) return;
        const double loss = g.value(fw.loss)[0];
        if (k == 0) fs.clean = loss;
        fs.ascent = loss;
        fs.targets = fw.n_targets;
        g.backward(fw.loss, &acc.grads);
        if (k + 1 == K) break;
        const nc::Var dv[3] = {pert.ex, pert.resp, pert.lect};
        double gnorm = 0.0;
        for (const auto& v : dv) gnorm += squared_norm(g.grad(v));
        gnorm = std::sqrt(gnorm);
        if (gnorm > 0.0) {
          for (std::size_t s = 0; s < 3; ++s) {
            const nc::Tensor& gs = g.grad(dv[s]);
            for (std::size_t e = 0; e < gs.size(); ++e) delta[s][e] += config.adv_step_size * gs[e] / gnorm;
          }
        }
        double dnorm = 0.0;
        for (const auto& t : delta) dnorm += squared_norm(t);
        dnorm = std::sqrt(dnorm);
        if (dnorm > config.adv_epsilon) {
          const double f = config.adv_epsilon / dnorm;
          for (auto& t : delta)
            for (auto& v : t.values()) v *= f;
          dnorm = config.adv_epsilon;
        }
        fs.max_norm = std::max(fs.max_norm, dnorm);
      }
      acc.targets += fs.targets;
    });
    AdversarialBatchStats bs;
    std::size_t targets = 0;
    for (const auto& fs : fstats) {
      bs.clean_loss += fs.clean;
      bs.ascent_loss += fs.ascent;
      bs.max_delta_norm = std::max(bs.max_delta_norm, fs.max_norm);
      targets += fs.targets;
    }
    const double n = static_cast<double>(std::max<std::size_t>(targets, 1));
    bs.clean_loss /= n;
    bs.ascent_loss /= n;
    r.grads.scale(1.0 / (n * static_cast<double>(K)));
    clip_gradients(r.grads, config.clip_norm);
    adamw_update(model.params(), r.grads, opt, config.adv_lr, settings);
    result.batches.push_back(bs);
    result.log.push_back({step, config.adv_lr, bs.clean_loss});
    finish_step(config, hooks, result.log.back(), step == steps);
  }
  return result;
}

std::vector<TrainLogEntry> train_global(GlobalModel& model, std::span<const std::vector<StepFeatures>> sequences,
                                        const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  std::vector<std::size_t> users;
  for (std::size_t u = 0; u < sequences.size(); ++u)
    if (!sequences[u].empty()) users.push_back(u);
  if (users.empty()) throw Error(ErrorKind::EmptyDataset, "no training sequences for the global model");
  const nc::ParamStore& params = model.params();
  AdamState opt(params);
  const AdamSettings settings{config.beta1, config.beta2, config.adam_eps, config.weight_decay};
  const auto batch = static_cast<std::size_t>(config.batch);
  const auto segment = static_cast<std::size_t>(model.config().segment);
  const std::size_t per_epoch = (users.size() + batch - 1) / batch;
  const long total_steps = static_cast<long>(per_epoch) * config.epochs;

  nc::Rng order_rng(stream_seed(config.seed, 0x676c6f62616cULL));
  std::vector<std::size_t> order(users.size());
  std::vector<TrainLogEntry> log;
  long step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    shuffle(order, order_rng);
    for (std::size_t b = 0; b < per_epoch; ++b) {
      const std::size_t begin = b * batch, end = std::min(users.size(), begin + batch);
      ++step;
      ChunkResult r = run_chunks(params, end - begin, config.threads, [&](std::size_t i, ChunkResult& acc) {
        const std::size_t slot = begin + i;
        nc::Rng rng(stream_seed(config.seed, 0x676c6f62616cULL + static_cast<std::uint64_t>(epoch), slot));
        const auto& seq = sequences[users[order[slot]]];
        std::vector<nc::Tensor> state;
        for (std::size_t s0 = 0; s0 < seq.size(); s0 += segment) {
          const std::size_t s1 = std::min(seq.size(), s0 + segment);
          nc::Graph g(&params);
          const GlobalSequence fw =
              model.forward_steps(g, std::span<const StepFeatures>(seq).subspan(s0, s1 - s0), state, &rng);
          if (fw.n_targets > 0) {
            acc.loss += g.value(fw.loss)[0];
            acc.targets += fw.n_targets;
            g.backward(fw.loss, &acc.grads);
          }
          state.clear();
          for (nc::Var v : fw.final_state) state.push_back(g.value(v));
        }
      });
      const double n = static_cast<double>(std::max<std::size_t>(r.targets, 1));
      r.grads.scale(1.0 / n);
      clip_gradients(r.grads, config.clip_norm);
      adamw_update(model.params(), r.grads, opt, config.lr_base, settings);
      log.push_back({step, config.lr_base, r.loss / n});
      finish_step(config, hooks, log.back(), step == total_steps);
    }
  }
  return log;
}

}  // namespace muse
