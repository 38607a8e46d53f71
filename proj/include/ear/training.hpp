// SPDX-License-Identifier: Apache-2.0
//
// AdamW with decoupled weight decay, warmup + cosine learning-rate schedule,
// global-norm clipping, a seeded epoch loop, and JSON checkpoints that resume
// a run bit for bit.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ear/autodiff.hpp"
#include "ear/error.hpp"
#include "ear/io.hpp"
#include "ear/nn.hpp"

namespace ear::train {

using json = nlohmann::json;

struct OptimConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 5.0;  // <= 0 disables clipping
};

struct TrainConfig {
  std::size_t batch_size = 8;
  std::size_t epochs = 30;
  std::size_t warmup_epochs = 4;
  double lr_peak = 2e-3;
  double lr_min = 2e-4;
  OptimConfig optim;
  std::uint64_t seed = 0;

  void validate() const {
    if (batch_size == 0 || epochs == 0) throw ConfigError("training: batch size and epochs must be positive");
    if (warmup_epochs >= epochs) {
      throw ConfigError("training: warmup (" + std::to_string(warmup_epochs) + ") must be shorter than the run (" +
                        std::to_string(epochs) + " epochs)");
    }
    if (!(lr_min >= 0.0 && lr_min <= lr_peak)) throw ConfigError("training: need 0 <= lr_min <= lr_peak");
    if (!(optim.beta1 >= 0 && optim.beta1 < 1 && optim.beta2 >= 0 && optim.beta2 < 1))
      throw ConfigError("training: Adam betas must lie in [0, 1)");
  }
};

/// Desk-scale defaults: linear warmup then cosine decay over
/// 30 epochs, with peaks sized for a 200-video corpus.
inline TrainConfig desk_generator_preset() { return {8, 30, 4, 2e-3, 2e-4, {}, 0}; }
inline TrainConfig desk_parser_preset() { return {8, 30, 4, 5e-3, 1e-4, {}, 0}; }
/// Full-scale values: batch 64, 80 epochs, 10 warmup, peak 1e-4, minima
/// 1e-5 (generator) and 5e-6 (parser).
inline TrainConfig full_generator_preset() { return {64, 80, 10, 1e-4, 1e-5, {}, 0}; }
inline TrainConfig full_parser_preset() { return {64, 80, 10, 1e-4, 5e-6, {}, 0}; }

inline void to_json(json& j, const TrainConfig& c) {
  j = {{"batch_size", c.batch_size}, {"epochs", c.epochs},        {"warmup_epochs", c.warmup_epochs},
       {"lr_peak", c.lr_peak},       {"lr_min", c.lr_min},        {"beta1", c.optim.beta1},
       {"beta2", c.optim.beta2},     {"eps", c.optim.eps},        {"weight_decay", c.optim.weight_decay},
       {"clip_norm", c.optim.clip_norm}, {"seed", c.seed}};
}

inline void from_json(const json& j, TrainConfig& c) {
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("batch_size", c.batch_size);
  get("epochs", c.epochs);
  get("warmup_epochs", c.warmup_epochs);
  get("lr_peak", c.lr_peak);
  get("lr_min", c.lr_min);
  get("beta1", c.optim.beta1);
  get("beta2", c.optim.beta2);
  get("eps", c.optim.eps);
  get("weight_decay", c.optim.weight_decay);
  get("clip_norm", c.optim.clip_norm);
  get("seed", c.seed);
}

/// Linear ramp 0 → peak over the warmup fraction, then cosine peak → min.
/// `progress` is the fraction of the whole run completed, in [0, 1].
inline double lr_at(double progress, const TrainConfig& c) {
  progress = std::clamp(progress, 0.0, 1.0);
  const double w = static_cast<double>(c.warmup_epochs) / static_cast<double>(c.epochs);
  if (progress < w) return c.lr_peak * progress / w;
  const double x = (progress - w) / (1.0 - w);
  return c.lr_min + (c.lr_peak - c.lr_min) * 0.5 * (1.0 + std::cos(std::numbers::pi * x));
}

struct AdamW {
  OptimConfig cfg;
  std::vector<Tensor> m, v;
  std::uint64_t t = 0;

  AdamW() = default;
  explicit AdamW(OptimConfig c) : cfg(c) {}

  void init(const std::vector<nn::ParameterRef>& params) {
    if (m.size() == params.size()) return;
    m.clear();
    v.clear();
    for (const auto& p : params) {
      m.emplace_back(p.var.dims());
      v.emplace_back(p.var.dims());
    }
  }

  void step(const std::vector<nn::ParameterRef>& params, double lr) {
    init(params);
    ++t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor g = params[i].var.grad();
      Tensor& w = params[i].var.mutable_value();
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[i][k] = cfg.beta1 * m[i][k] + (1.0 - cfg.beta1) * g[k];
        v[i][k] = cfg.beta2 * v[i][k] + (1.0 - cfg.beta2) * g[k] * g[k];
        const double mhat = m[i][k] / bc1, vhat = v[i][k] / bc2;
        w[k] -= lr * (cfg.weight_decay * w[k] + mhat / (std::sqrt(vhat) + cfg.eps));
      }
    }
  }
};

inline double global_grad_norm(const std::vector<nn::ParameterRef>& params) {
  double s = 0.0;
  for (const auto& p : params)
    if (p.var.has_grad())
      for (double g : p.var.mutable_grad()) s += g * g;
  return std::sqrt(s);
}

/// Rescales all gradients so their global norm is at most max_norm; returns
/// the norm before clipping.
inline double clip_grad_norm(const std::vector<nn::ParameterRef>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& p : params)
      if (p.var.has_grad())
        for (double& g : p.var.mutable_grad()) g *= s;
  }
  return norm;
}

/// Scalar objective of one step plus named term magnitudes for diagnostics.
struct LossTerms {
  Var total;
  std::vector<std::pair<std::string, double>> terms;
};

inline std::string describe_terms(const LossTerms& l) {
  std::ostringstream os;
  os.precision(6);
  for (std::size_t i = 0; i < l.terms.size(); ++i) os << (i ? ", " : "") << l.terms[i].first << "=" << l.terms[i].second;
  return os.str();
}

/// One forward/backward/update. Throws NumericalError on a non-finite loss
/// or gradient, naming the step and every loss term.
inline double step(const std::vector<nn::ParameterRef>& params, AdamW& opt, double lr,
                   const std::function<LossTerms()>& forward, std::uint64_t step_index = 0) {
  for (const auto& p : params) p.var.zero_grad();
  Tape tape;
  LossTerms loss;
  {
    TapeScope scope(tape);
    loss = forward();
  }
  const double value = loss.total.value()[0];
  if (!std::isfinite(value)) {
    throw NumericalError("step " + std::to_string(step_index) + ": non-finite loss " + std::to_string(value) + " (" +
                         describe_terms(loss) + ")");
  }
  tape.backward(loss.total);
  const double norm = clip_grad_norm(params, opt.cfg.clip_norm);
  if (!std::isfinite(norm)) {
    throw NumericalError("step " + std::to_string(step_index) + ": non-finite gradient norm (loss " +
                         std::to_string(value) + "; " + describe_terms(loss) + ")");
  }
  opt.step(params, lr);
  return value;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

inline json tensor_json(const Tensor& t) { return {{"dims", t.dims()}, {"values", std::vector<double>(t.values().begin(), t.values().end())}}; }

inline Tensor tensor_from_json(const json& j) {
  return Tensor(j.at("dims").get<Dims>(), j.at("values").get<std::vector<double>>());
}

inline json state_json(const nn::ModuleState& s) {
  json params = json::object(), buffers = json::object();
  for (const auto& p : s.params) params[p.name] = tensor_json(p.var.value());
  for (const auto& b : s.buffers) buffers[b.name] = tensor_json(*b.tensor);
  return {{"params", params}, {"buffers", buffers}};
}

/// Copies named values into the module; every parameter and buffer must be
/// present with matching dims.
inline void load_state_json(const nn::ModuleState& s, const json& j) {
  auto assign = [&](const std::string& kind, const std::string& name, Tensor& dst) {
    const json& src = j.at(kind);
    if (!src.contains(name)) throw FormatError("checkpoint lacks " + kind + " " + name);
    Tensor t = tensor_from_json(src.at(name));
    if (t.dims() != dst.dims()) {
      throw FormatError("checkpoint " + kind + " " + name + " has dims " + dims_to_string(t.dims()) + ", model expects " +
                        dims_to_string(dst.dims()));
    }
    dst = std::move(t);
  };
  for (const auto& p : s.params) assign("params", p.name, p.var.mutable_value());
  for (const auto& b : s.buffers) assign("buffers", b.name, *b.tensor);
}

struct Checkpoint {
  json model;  // {"params", "buffers"}
  json optimizer;
  std::size_t epoch = 0;  // completed epochs
  std::string rng_state;
  std::uint64_t config_hash = 0;
  json extra;  // model architecture etc.
};

inline std::string rng_to_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

inline void rng_from_string(std::mt19937_64& rng, const std::string& s) {
  std::istringstream is(s);
  is >> rng;
  if (!is) throw FormatError("checkpoint: malformed rng state");
}

inline json optimizer_json(const AdamW& opt, const nn::ModuleState& s) {
  json m = json::object(), v = json::object();
  for (std::size_t i = 0; i < opt.m.size(); ++i) {
    m[s.params[i].name] = tensor_json(opt.m[i]);
    v[s.params[i].name] = tensor_json(opt.v[i]);
  }
  return {{"t", opt.t}, {"m", m}, {"v", v}};
}

inline void load_optimizer_json(AdamW& opt, const nn::ModuleState& s, const json& j) {
  opt.t = j.at("t").get<std::uint64_t>();
  opt.m.clear();
  opt.v.clear();
  if (j.at("m").empty()) return;
  for (const auto& p : s.params) {
    opt.m.push_back(tensor_from_json(j.at("m").at(p.name)));
    opt.v.push_back(tensor_from_json(j.at("v").at(p.name)));
  }
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  io::write_json(path, {{"format", "ear-checkpoint"},
                        {"version", 1},
                        {"epoch", c.epoch},
                        {"rng", c.rng_state},
                        {"config_hash", c.config_hash},
                        {"model", c.model},
                        {"optimizer", c.optimizer},
                        {"extra", c.extra}});
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const json j = io::read_json(path);
  try {
    if (j.at("format") != "ear-checkpoint") throw FormatError(path.string() + ": not an ear checkpoint");
    Checkpoint c;
    c.epoch = j.at("epoch").get<std::size_t>();
    c.rng_state = j.at("rng").get<std::string>();
    c.config_hash = j.at("config_hash").get<std::uint64_t>();
    c.model = j.at("model");
    c.optimizer = j.at("optimizer");
    c.extra = j.value("extra", json::object());
    return c;
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Epoch loop

struct FitOptions {
  std::filesystem::path checkpoint;  // written after every epoch when set
  bool resume = false;               // continue from `checkpoint` if it exists
  std::string config_key;            // hashed into the checkpoint; resume requires a match
  json extra;
  std::size_t stop_after = std::numeric_limits<std::size_t>::max();  // epochs to run in this call
  std::function<void(std::size_t epoch, double mean_loss)> on_epoch;
};

struct History {
  std::vector<double> step_loss;
  std::vector<double> epoch_loss;
  std::size_t start_epoch = 0;
};

/// Loss of one mini-batch given item indices; draws dropout from `rng`.
using BatchLoss = std::function<LossTerms(std::span<const std::size_t> batch, const nn::Context& ctx)>;

/// Shuffled mini-batch training over `num_items` items. The single rng
/// stream drives both batch order and dropout, so a resumed run replays the
/// uninterrupted one exactly.
inline History fit(nn::ModuleState& state, std::size_t num_items, const TrainConfig& cfg, const BatchLoss& loss_fn,
                   const FitOptions& opts = {}) {
  cfg.validate();
  if (num_items == 0) throw ConfigError("training: empty corpus");
  std::mt19937_64 rng(cfg.seed);
  AdamW opt(cfg.optim);
  History hist;
  const std::uint64_t hash = fnv1a(opts.config_key);
  if (opts.resume && !opts.checkpoint.empty() && std::filesystem::exists(opts.checkpoint)) {
    const Checkpoint c = load_checkpoint(opts.checkpoint);
    if (c.config_hash != hash) throw ConfigError("resume: checkpoint was written with a different configuration");
    load_state_json(state, c.model);
    load_optimizer_json(opt, state, c.optimizer);
    rng_from_string(rng, c.rng_state);
    hist.start_epoch = c.epoch;
  }
  const std::size_t steps_per_epoch = (num_items + cfg.batch_size - 1) / cfg.batch_size;
  const double total_steps = static_cast<double>(steps_per_epoch * cfg.epochs);
  std::vector<std::size_t> order(num_items);
  const std::size_t last = hist.start_epoch + std::min(opts.stop_after, cfg.epochs - hist.start_epoch);
  for (std::size_t epoch = hist.start_epoch; epoch < last; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      const std::size_t begin = s * cfg.batch_size, end = std::min(num_items, begin + cfg.batch_size);
      const std::span<const std::size_t> batch(order.data() + begin, end - begin);
      const std::uint64_t global = epoch * steps_per_epoch + s;
      const double lr = lr_at(static_cast<double>(global) / total_steps, cfg);
      const nn::Context ctx = nn::Context::train(rng);
      const double l = step(state.params, opt, lr, [&] { return loss_fn(batch, ctx); }, global);
      hist.step_loss.push_back(l);
      sum += l;
    }
    hist.epoch_loss.push_back(sum / static_cast<double>(steps_per_epoch));
    if (opts.on_epoch) opts.on_epoch(epoch, hist.epoch_loss.back());
    if (!opts.checkpoint.empty()) {
      save_checkpoint({state_json(state), optimizer_json(opt, state), epoch + 1, rng_to_string(rng), hash, opts.extra},
                      opts.checkpoint);
    }
  }
  return hist;
}

}  // namespace ear::train
