#pragma once

// Synchronous advantage actor-critic. Lanes are stepped in a fixed order and
// each lane owns its action RNG, so the sampled stream never depends on
// scheduling.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "adaptrl/autodiff.hpp"
#include "adaptrl/checkpoint.hpp"
#include "adaptrl/env.hpp"
#include "adaptrl/metrics.hpp"
#include "adaptrl/networks.hpp"
#include "adaptrl/optimizer.hpp"
#include "adaptrl/rng.hpp"

namespace adaptrl {

struct TrainerConfig {
  int n_envs = 16;
  int n_steps = 5;
  double gamma = 0.99;
  double value_coef = 0.5;
  double entropy_coef = 0.01;
  double learning_rate = 7e-4;
  double max_grad_norm = 0.5;
  std::int64_t total_frames = 2'000'000;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 0;  // frames between checkpoints, 0 = end only

  std::int64_t batch_frames() const { return static_cast<std::int64_t>(n_envs) * n_steps; }

  void validate() const {
    if (n_envs < 1 || n_steps < 1) throw std::invalid_argument("n_envs and n_steps must be >= 1");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("gamma must lie in [0, 1]");
    if (total_frames <= 0) throw std::invalid_argument("frame budget must be positive");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
    if (!(max_grad_norm > 0.0)) throw std::invalid_argument("max_grad_norm must be positive");
  }
};

/// Transitions laid out step-major: entry t * n_envs + e is lane e at step t.
struct RolloutBatch {
  int n_envs = 0;
  int n_steps = 0;
  Tensor observations;            // [n_steps * n_envs, 2, 16, 20]
  std::vector<int> actions;
  std::vector<double> rewards;
  std::vector<std::uint8_t> terminals;  // episode ended after this transition
  std::vector<double> log_probs;
  std::vector<double> values;
  std::vector<double> bootstrap_values;  // [n_envs], V of the state after the last step

  std::size_t size() const { return static_cast<std::size_t>(n_envs) * static_cast<std::size_t>(n_steps); }
  std::size_t index(int t, int e) const { return static_cast<std::size_t>(t * n_envs + e); }
};

struct EpisodeStats {
  double score = 0.0;
  int frames = 0;
  std::int64_t episode = 0;  // 1-based, counted over all lanes in completion order
  std::int64_t batch = 0;    // 1-based index of the batch in which it finished
  std::int64_t frames_seen = 0;  // total frames collected when that batch finished
  int trial = 0;
};

/// G_t = r_t + gamma * G_{t+1}, G_n = bootstrap; a terminal at t zeroes the
/// tail beyond t.
inline std::vector<double> compute_returns(const RolloutBatch& b, double gamma) {
  if (b.rewards.size() != b.size() || b.terminals.size() != b.size() ||
      b.bootstrap_values.size() != static_cast<std::size_t>(b.n_envs))
    throw ShapeError("rollout batch fields disagree with n_envs * n_steps");
  std::vector<double> out(b.size());
  for (int e = 0; e < b.n_envs; ++e) {
    double g = b.bootstrap_values.at(static_cast<std::size_t>(e));
    for (int t = b.n_steps; t-- > 0;) {
      const std::size_t i = b.index(t, e);
      if (b.terminals[i]) g = 0.0;
      g = b.rewards[i] + gamma * g;
      out[i] = g;
    }
  }
  return out;
}

inline Var a2c_loss(Tape& t, const ParameterSet& p, const RolloutBatch& b,
                    const std::vector<double>& returns, double value_coef, double entropy_coef) {
  Var e = encode(t, p, t.input(b.observations));
  return t.a2c_objective(policy_logits(t, p, e), state_value(t, p, e), b.actions, returns,
                         value_coef, entropy_coef);
}

/// Steps a vector of environments under the current policy.
class RolloutCollector {
 public:
  RolloutCollector(EnvironmentSpec spec, int n_envs, std::uint64_t seed, int trial = 0)
      : spec_(spec), seed_(seed), trial_(trial) {
    if (n_envs < 1) throw std::invalid_argument("n_envs must be >= 1");
    for (int e = 0; e < n_envs; ++e) {
      lanes_.push_back(Lane{Environment(spec), {}, Rng(derive_seed(seed, {0xAC7ULL, std::uint64_t(e)})),
                            0, 0.0, 0});
      reset_lane(static_cast<std::size_t>(e));
    }
  }

  /// Sample the argmax action instead of drawing from the policy.
  void set_greedy(bool g) { greedy_ = g; }
  int n_envs() const { return static_cast<int>(lanes_.size()); }
  std::int64_t frames() const { return frames_; }
  const std::vector<EpisodeStats>& episodes() const { return episodes_; }
  void set_batch_index(std::int64_t b) { batch_ = b; }

  /// Optional hook that sees every observation fed to the policy.
  using ObservationHook = std::function<void(const Tensor& obs, const Tensor& probs)>;

  RolloutBatch collect(const ParameterSet& params, int n_steps, const ObservationHook& hook = {}) {
    const int n = n_envs();
    RolloutBatch b;
    b.n_envs = n;
    b.n_steps = n_steps;
    const std::size_t total = static_cast<std::size_t>(n) * static_cast<std::size_t>(n_steps);
    b.observations = Tensor({total, 2, kRows, kCols});
    b.actions.resize(total);
    b.rewards.resize(total);
    b.terminals.resize(total);
    b.log_probs.resize(total);
    b.values.resize(total);
    const std::size_t first_episode = episodes_.size();
    for (int t = 0; t < n_steps; ++t) {
      const Tensor obs = current_observations();
      const PolicyOutput out = evaluate_policy(params, obs);
      if (hook) hook(obs, out.probabilities);
      const std::size_t a_count = out.probabilities.dim(1);
      std::copy(obs.data().begin(), obs.data().end(),
                b.observations.data().begin() + static_cast<std::ptrdiff_t>(b.index(t, 0) * kObservationSize));
      for (int e = 0; e < n; ++e) {
        Lane& lane = lanes_[static_cast<std::size_t>(e)];
        const double* probs = out.probabilities.raw() + static_cast<std::size_t>(e) * a_count;
        const int action = pick(lane.rng, probs, a_count);
        const std::size_t i = b.index(t, e);
        b.actions[i] = action;
        b.log_probs[i] = std::log(std::max(probs[action], 1e-300));
        b.values[i] = out.values[static_cast<std::size_t>(e)];
        StepResult r = lane.env.step(action);
        lane.obs = r.observation;
        lane.score += r.reward;
        lane.frames += 1;
        ++frames_;
        b.rewards[i] = r.reward;
        b.terminals[i] = r.terminal ? 1 : 0;
        if (r.terminal) {
          EpisodeStats s;
          s.score = lane.score;
          s.frames = lane.frames;
          s.episode = static_cast<std::int64_t>(episodes_.size()) + 1;
          s.trial = trial_;
          episodes_.push_back(s);
          reset_lane(static_cast<std::size_t>(e));
        }
      }
    }
    for (std::size_t k = first_episode; k < episodes_.size(); ++k) {
      episodes_[k].batch = batch_;
      episodes_[k].frames_seen = frames_;
    }
    const PolicyOutput tail = evaluate_policy(params, current_observations());
    b.bootstrap_values.assign(tail.values.data().begin(), tail.values.data().end());
    return b;
  }

  Tensor current_observations() const {
    std::vector<Observation> obs;
    obs.reserve(lanes_.size());
    for (const Lane& l : lanes_) obs.push_back(l.obs);
    return stack_observations(obs);
  }

 private:
  struct Lane {
    Environment env;
    Observation obs;
    Rng rng;
    std::int64_t resets = 0;
    double score = 0.0;
    int frames = 0;
  };

  void reset_lane(std::size_t e) {
    Lane& l = lanes_[e];
    l.obs = l.env.reset(derive_seed(seed_, {0xE5EEDULL, e, static_cast<std::uint64_t>(l.resets)}));
    l.resets += 1;
    l.score = 0.0;
    l.frames = 0;
  }

  int pick(Rng& rng, const double* probs, std::size_t n) const {
    if (greedy_) return static_cast<int>(std::max_element(probs, probs + n) - probs);
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t j = 0; j + 1 < n; ++j) {
      acc += probs[j];
      if (u < acc) return static_cast<int>(j);
    }
    return static_cast<int>(n - 1);
  }

  EnvironmentSpec spec_;
  std::uint64_t seed_;
  int trial_;
  bool greedy_ = false;
  std::vector<Lane> lanes_;
  std::vector<EpisodeStats> episodes_;
  std::int64_t frames_ = 0;
  std::int64_t batch_ = 0;
};

/// Appends the three curve series for one finished episode.
class CurveRecorder {
 public:
  explicit CurveRecorder(int trial) : trial_(trial) {}

  void add(const EpisodeStats& s) {
    const double score_avg = scores_.push(s.score);
    const double frames_avg = frames_.push(static_cast<double>(s.frames));
    records_.push_back({trial_, Series::ScoreVsBatches, s.batch, score_avg});
    records_.push_back({trial_, Series::ScoreVsGames, s.episode, score_avg});
    records_.push_back({trial_, Series::EpisodeFramesMa100, s.episode, frames_avg});
  }
  const std::vector<CurveRecord>& records() const { return records_; }

 private:
  int trial_;
  MovingAverage scores_{100};
  MovingAverage frames_{100};
  std::vector<CurveRecord> records_;
};

struct TrainResult {
  NetworkBundle bundle;
  std::vector<EpisodeStats> episodes;
  std::vector<CurveRecord> records;
  std::int64_t updates = 0;
  std::int64_t frames = 0;
  OptimizerState optimizer;
};

struct TrainHooks {
  /// Called after every update with (updates, frames).
  std::function<void(std::int64_t, std::int64_t, const TrainResult&)> on_update;
  /// Destination for periodic and final checkpoints; empty disables them.
  std::filesystem::path checkpoint_path;
};

/// Loss / backward / clip / Adam on given returns. Returns the loss value.
inline double a2c_apply(NetworkBundle& bundle, const RolloutBatch& batch, const std::vector<double>& returns,
                        const TrainerConfig& c, OptimizerState& opt) {
  Tape t;
  Var loss = a2c_loss(t, bundle.params, batch, returns, c.value_coef, c.entropy_coef);
  t.backward(loss);
  ParameterSet grads = t.gradients();
  clip_global_norm(grads, c.max_grad_norm);
  optimizer_update(bundle.params, grads, opt);
  return t.value(loss).item();
}

inline double a2c_update(NetworkBundle& bundle, const RolloutBatch& batch, const TrainerConfig& c,
                         OptimizerState& opt) {
  return a2c_apply(bundle, batch, compute_returns(batch, c.gamma), c, opt);
}

inline TrainResult train(const EnvironmentSpec& spec, const TrainerConfig& c,
                         std::optional<NetworkBundle> initial = std::nullopt, int trial = 0,
                         const TrainHooks& hooks = {}) {
  c.validate();
  TrainResult r;
  if (initial) {
    r.bundle = std::move(*initial);
    if (r.bundle.action_count != spec.action_count) {
      throw ShapeError("bundle has " + std::to_string(r.bundle.action_count) +
                       " actions, environment " + std::string(to_string(spec.id)) + " has " +
                       std::to_string(spec.action_count));
    }
    for (Role role : {Role::Encoder, Role::Policy, Role::Value}) ensure_role(r.bundle, role);
  } else {
    r.bundle = build(kAgentRoles, spec.action_count, derive_seed(c.seed, {0xB0DEULL}));
  }
  AdamConfig adam;
  adam.learning_rate = c.learning_rate;
  r.optimizer = OptimizerState(adam);
  RolloutCollector collector(spec, c.n_envs, derive_seed(c.seed, {0xC011ULL}), trial);
  CurveRecorder recorder(trial);
  std::int64_t next_checkpoint = c.checkpoint_every > 0 ? c.checkpoint_every : -1;
  std::size_t seen = 0;
  while (collector.frames() < c.total_frames) {
    collector.set_batch_index(r.updates + 1);
    const RolloutBatch batch = collector.collect(r.bundle.params, c.n_steps);
    a2c_update(r.bundle, batch, c, r.optimizer);
    r.updates += 1;
    r.frames = collector.frames();
    for (; seen < collector.episodes().size(); ++seen) recorder.add(collector.episodes()[seen]);
    if (next_checkpoint > 0 && r.frames >= next_checkpoint && !hooks.checkpoint_path.empty()) {
      save_checkpoint(r.bundle, hooks.checkpoint_path);
      next_checkpoint += c.checkpoint_every;
    }
    if (hooks.on_update) hooks.on_update(r.updates, r.frames, r);
  }
  r.episodes = collector.episodes();
  r.records = recorder.records();
  if (!hooks.checkpoint_path.empty()) save_checkpoint(r.bundle, hooks.checkpoint_path);
  return r;
}

/// Mean score of the last `window` finished episodes (all of them if fewer).
inline double recent_mean_score(const std::vector<EpisodeStats>& eps, std::size_t window = 100) {
  if (eps.empty()) return 0.0;
  const std::size_t lo = eps.size() > window ? eps.size() - window : 0;
  double acc = 0.0;
  for (std::size_t i = lo; i < eps.size(); ++i) acc += eps[i].score;
  return acc / static_cast<double>(eps.size() - lo);
}

/// Frames collected when the trailing `window`-episode mean score first
/// reached `threshold`, counting only full windows. -1 if never.
inline std::int64_t frames_to_threshold(const std::vector<EpisodeStats>& eps, double threshold,
                                        std::size_t window = 100) {
  double acc = 0.0;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    acc += eps[i].score;
    if (i >= window) acc -= eps[i - window].score;
    if (i + 1 >= window && acc / static_cast<double>(window) >= threshold) return eps[i].frames_seen;
  }
  return -1;
}

}  // namespace adaptrl
