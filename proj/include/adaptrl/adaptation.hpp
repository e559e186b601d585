#pragma once

// Adversarial autoencoder alignment of a target-game encoder to a fixed set of
// source embeddings. Per batch: one autoencoder step, N critic steps, one
// generator (encoder) step.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "adaptrl/a2c.hpp"
#include "adaptrl/autodiff.hpp"
#include "adaptrl/checkpoint.hpp"
#include "adaptrl/env.hpp"
#include "adaptrl/metrics.hpp"
#include "adaptrl/networks.hpp"
#include "adaptrl/optimizer.hpp"
#include "adaptrl/rng.hpp"

namespace adaptrl {

// ---- datasets ----

struct EmbeddingDataset {
  Tensor embeddings;  // [count, 32]
  std::uint64_t source_hash = 0;
  std::uint64_t seed = 0;
  std::size_t count() const { return embeddings.dim(0); }
  friend bool operator==(const EmbeddingDataset&, const EmbeddingDataset&) = default;
};

struct FrameDataset {
  Tensor frames;  // [count, 2, 16, 20]
  GameId env = GameId::MiniPong;
  std::uint64_t seed = 0;
  std::size_t count() const { return frames.dim(0); }
  friend bool operator==(const FrameDataset&, const FrameDataset&) = default;
};

/// Identity of a parameter set: hash of its canonical container encoding.
inline std::uint64_t parameter_hash(const ParameterSet& p) {
  return fnv1a(encode_container(kCheckpointMagic, p));
}

/// Rows [begin, begin + n) of a tensor whose first axis indexes samples.
inline Tensor take_rows(const Tensor& t, std::span<const std::size_t> rows) {
  Shape shape = t.shape();
  const std::size_t width = t.size() / shape[0];
  shape[0] = rows.size();
  Tensor out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= t.dim(0)) throw std::out_of_range("take_rows: row index out of range");
    std::copy_n(t.raw() + rows[i] * width, width, out.data().begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  return out;
}

inline Tensor first_rows(const Tensor& t, std::size_t n) {
  std::vector<std::size_t> rows(std::min(n, t.dim(0)));
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return take_rows(t, rows);
}

/// Embeds a large set in fixed-size chunks.
inline Tensor embed_all(const ParameterSet& encoder, const Tensor& frames, std::size_t chunk = 256) {
  const std::size_t n = frames.dim(0);
  Tensor out({n, kEmbeddingDim});
  for (std::size_t lo = 0; lo < n; lo += chunk) {
    std::vector<std::size_t> rows(std::min(chunk, n - lo));
    std::iota(rows.begin(), rows.end(), lo);
    const Tensor e = embed(encoder, take_rows(frames, rows));
    std::copy(e.data().begin(), e.data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(lo * kEmbeddingDim));
  }
  return out;
}

/// Plays the source policy (sampling actions) and records the encoder output
/// for every observation it sees.
inline EmbeddingDataset collect_source_embeddings(const NetworkBundle& source, const EnvironmentSpec& spec,
                                                  std::size_t count, std::uint64_t seed, int n_envs = 16) {
  if (count == 0) throw std::invalid_argument("embedding count must be positive");
  if (source.action_count != spec.action_count) {
    throw ShapeError("source bundle has " + std::to_string(source.action_count) +
                     " actions, environment " + std::string(to_string(spec.id)) + " has " +
                     std::to_string(spec.action_count));
  }
  if (!source.has(Role::Encoder) || !source.has(Role::Policy) || !source.has(Role::Value)) {
    throw std::invalid_argument("source bundle needs encoder, policy and value roles");
  }
  EmbeddingDataset ds;
  ds.embeddings = Tensor({count, kEmbeddingDim});
  ds.source_hash = parameter_hash(source.params);
  ds.seed = seed;
  RolloutCollector collector(spec, n_envs, derive_seed(seed, {0xE3BEDULL}));
  std::size_t filled = 0;
  auto hook = [&](const Tensor& obs, const Tensor&) {
    if (filled >= count) return;
    const Tensor e = embed(source.params, obs);
    const std::size_t take = std::min(count - filled, e.dim(0));
    std::copy_n(e.raw(), take * kEmbeddingDim,
                ds.embeddings.data().begin() + static_cast<std::ptrdiff_t>(filled * kEmbeddingDim));
    filled += take;
  };
  while (filled < count) collector.collect(source.params, 1, hook);
  return ds;
}

/// Uniform-random play with automatic resets; no learning.
inline FrameDataset collect_target_frames(const EnvironmentSpec& spec, std::size_t count, std::uint64_t seed) {
  if (count == 0) throw std::invalid_argument("frame count must be positive");
  FrameDataset ds;
  ds.frames = Tensor({count, 2, kRows, kCols});
  ds.env = spec.id;
  ds.seed = seed;
  Environment env(spec);
  Rng actions(derive_seed(seed, {0xF4A3ULL}));
  std::uint64_t episode = 0;
  Observation obs = env.reset(derive_seed(seed, {0xE9ULL, episode}));
  for (std::size_t i = 0; i < count; ++i) {
    obs.write_to(ds.frames.data().subspan(i * kObservationSize, kObservationSize));
    const StepResult r = env.step(static_cast<int>(actions.below(static_cast<std::uint64_t>(spec.action_count))));
    obs = r.observation;
    if (r.terminal) obs = env.reset(derive_seed(seed, {0xE9ULL, ++episode}));
  }
  return ds;
}

inline void save_embeddings(const EmbeddingDataset& ds, const std::filesystem::path& path) {
  ParameterSet out;
  out.insert("embeddings", ds.embeddings);
  out.insert("meta.source_hash", pack_u64(ds.source_hash));
  out.insert("meta.seed", pack_u64(ds.seed));
  write_container(path, kDatasetMagic, out);
}

inline EmbeddingDataset load_embeddings(const std::filesystem::path& path) {
  const ParameterSet in = read_container(path, kDatasetMagic);
  if (in.size() != 3 || !in.contains("embeddings") || !in.contains("meta.source_hash") ||
      !in.contains("meta.seed")) {
    throw FormatError(path.string() + " is not an embedding dataset");
  }
  EmbeddingDataset ds;
  ds.embeddings = in.at("embeddings");
  if (ds.embeddings.rank() != 2 || ds.embeddings.dim(1) != kEmbeddingDim) {
    throw ShapeError("embedding dataset must be [count, 32], got " + shape_string(ds.embeddings.shape()));
  }
  ds.source_hash = unpack_u64(in.at("meta.source_hash"));
  ds.seed = unpack_u64(in.at("meta.seed"));
  return ds;
}

inline void save_frames(const FrameDataset& ds, const std::filesystem::path& path) {
  ParameterSet out;
  out.insert("frames", ds.frames);
  out.insert("meta.env", Tensor({1}, {static_cast<double>(ds.env)}));
  out.insert("meta.seed", pack_u64(ds.seed));
  write_container(path, kDatasetMagic, out);
}

inline FrameDataset load_frames(const std::filesystem::path& path) {
  const ParameterSet in = read_container(path, kDatasetMagic);
  if (in.size() != 3 || !in.contains("frames") || !in.contains("meta.env") || !in.contains("meta.seed")) {
    throw FormatError(path.string() + " is not a frame dataset");
  }
  FrameDataset ds;
  ds.frames = in.at("frames");
  const Shape expect{ds.frames.dim(0), 2, kRows, kCols};
  if (ds.frames.shape() != expect) {
    throw ShapeError("frame dataset must be [count, 2, 16, 20], got " + shape_string(ds.frames.shape()));
  }
  const double env = in.at("meta.env").item();
  if (env != 0.0 && env != 1.0 && env != 2.0) throw FormatError("unknown environment id in frame dataset");
  ds.env = static_cast<GameId>(static_cast<int>(env));
  ds.seed = unpack_u64(in.at("meta.seed"));
  return ds;
}

// ---- losses ----

enum class Objective { Wgan, VanillaGan };

inline std::string_view to_string(Objective o) { return o == Objective::Wgan ? "wgan" : "vanilla-gan"; }

inline Objective parse_objective(std::string_view s) {
  if (s == "wgan") return Objective::Wgan;
  if (s == "vanilla-gan" || s == "vanilla") return Objective::VanillaGan;
  throw std::invalid_argument("unknown objective: " + std::string(s));
}

/// Mean squared reconstruction error over batch and pixels.
inline Var ae_loss(Tape& t, const ParameterSet& p, const Tensor& frames) {
  Var x = t.input(frames);
  return t.mse(decode(t, p, encode(t, p, x)), frames);
}

/// Critic objective to minimize. The target embeddings come from a frozen
/// encoder; only critic parameters are trainable.
///   wgan:    mean D(target) - mean D(source)
///   vanilla: -mean log s(D(source)) - mean log(1 - s(D(target)))
inline Var critic_loss(Tape& t, const ParameterSet& p, const Tensor& source, Var target_embedding,
                       Objective objective) {
  Var ds = critic_score(t, p, t.input(source));
  Var dt = critic_score(t, p, target_embedding);
  if (objective == Objective::Wgan) return t.sub(t.mean(dt), t.mean(ds));
  return t.scale(t.add(t.mean(t.log_sigmoid(ds)), t.mean(t.log_sigmoid(t.scale(dt, -1.0)))), -1.0);
}

/// Generator objective: the encoder is trainable, the critic frozen.
///   wgan:    -mean D(E(x))
///   vanilla: -mean log s(D(E(x)))   (non-saturating)
inline Var generator_loss(Tape& t, const ParameterSet& p, const Tensor& frames, Objective objective) {
  Var score = critic_score(t, p, encode(t, p, t.input(frames), true), false);
  if (objective == Objective::Wgan) return t.scale(t.mean(score), -1.0);
  return t.scale(t.mean(t.log_sigmoid(score)), -1.0);
}

/// Clamps every critic parameter into [-c, c].
inline void clip_critic(ParameterSet& p, double c) {
  for (const ParamSpec& spec : role_layout(Role::Critic, 3)) {
    for (double& v : p.at(spec.name).data()) v = std::clamp(v, -c, c);
  }
}

// ---- alignment metric ----

/// Exact 1-D Wasserstein-1 distance between two empirical distributions
/// (integral of |F_a - F_b|). Inputs are sorted in place.
inline double wasserstein_1d(std::vector<double>& a, std::vector<double>& b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  if (a.size() == b.size()) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
    return acc / na;
  }
  std::size_t i = 0, j = 0;
  double acc = 0.0;
  double prev = std::min(a.front(), b.front());
  while (i < a.size() || j < b.size()) {
    const double x = j >= b.size() || (i < a.size() && a[i] <= b[j]) ? a[i] : b[j];
    acc += std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb) * (x - prev);
    prev = x;
    while (i < a.size() && a[i] == x) ++i;
    while (j < b.size() && b[j] == x) ++j;
  }
  return acc;
}

/// Random unit direction in `dim` dimensions (Box-Muller on the counter RNG).
inline std::vector<double> random_direction(Rng& rng, std::size_t dim) {
  std::vector<double> u(dim);
  double norm = 0.0;
  for (std::size_t k = 0; k < dim; ++k) {
    const double r = std::sqrt(-2.0 * std::log(1.0 - rng.uniform()));
    u[k] = r * std::cos(2.0 * M_PI * rng.uniform());
    norm += u[k] * u[k];
  }
  norm = std::sqrt(norm);
  for (double& v : u) v /= norm;
  return u;
}

/// Sliced Wasserstein-1: mean over random unit directions of the 1-D distance
/// between the projected sets. Symmetric and deterministic given the seed.
inline double measure_alignment(const Tensor& a, const Tensor& b, int projections, std::uint64_t seed) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ShapeError("measure_alignment: inputs must be [n, d] with equal d, got " +
                     shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  if (projections < 1) throw std::invalid_argument("projections must be >= 1");
  const std::size_t d = a.dim(1);
  Rng rng(derive_seed(seed, {0x51CEULL}));
  auto project = [d](const Tensor& m, const std::vector<double>& u) {
    std::vector<double> out(m.dim(0));
    for (std::size_t r = 0; r < out.size(); ++r) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) acc += m[r * d + k] * u[k];
      out[r] = acc;
    }
    return out;
  };
  double total = 0.0;
  for (int p = 0; p < projections; ++p) {
    const std::vector<double> u = random_direction(rng, d);
    std::vector<double> pa = project(a, u), pb = project(b, u);
    total += wasserstein_1d(pa, pb);
  }
  return total / projections;
}

// ---- training loop ----

struct AdaptConfig {
  int epochs = 20;
  std::size_t batch_size = 64;
  int critic_steps = 5;
  Objective objective = Objective::Wgan;
  double clip = 0.01;
  double ae_lr = 1e-3;
  double critic_lr = 5e-5;
  double generator_lr = 5e-4;
  double critic_beta1 = 0.0;
  std::uint64_t seed = 0;
  int alignment_projections = 128;
  std::size_t alignment_samples = 0;  // rows used for alignment, 0 = all

  void validate() const {
    if (epochs < 0) throw std::invalid_argument("epochs must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (critic_steps < 1) throw std::invalid_argument("critic_steps must be >= 1");
    if (!(clip > 0.0)) throw std::invalid_argument("clip must be positive");
    if (!(ae_lr > 0.0 && critic_lr > 0.0 && generator_lr > 0.0)) {
      throw std::invalid_argument("learning rates must be positive");
    }
  }
};

struct EpochLosses {
  int epoch = 0;
  double ae_loss = 0.0;
  double critic_loss = 0.0;
  double generator_loss = 0.0;
  double alignment = 0.0;
};

struct AdaptReport {
  std::vector<EpochLosses> epochs;
  double alignment_before = 0.0;
  double alignment_after = 0.0;
};

inline std::string adapt_report_csv(const AdaptReport& r) {
  std::string out = "epoch,ae_loss,critic_loss,gen_loss,alignment\n";
  for (const EpochLosses& e : r.epochs) {
    out += std::to_string(e.epoch) + "," + format_double(e.ae_loss) + "," + format_double(e.critic_loss) +
           "," + format_double(e.generator_loss) + "," + format_double(e.alignment) + "\n";
  }
  return out;
}

struct AdaptResult {
  NetworkBundle bundle;  // encoder, decoder, critic
  AdaptReport report;
  OptimizerState ae_opt, critic_opt, generator_opt;
};

/// Walks a shuffled permutation, reshuffling on exhaustion.
class Sampler {
 public:
  Sampler(std::size_t n, std::uint64_t seed) : order_(n), rng_(seed) {
    if (n == 0) throw std::invalid_argument("cannot sample from an empty dataset");
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    shuffle();
  }
  std::vector<std::size_t> next(std::size_t k) {
    std::vector<std::size_t> out;
    out.reserve(k);
    while (out.size() < k) {
      if (cursor_ == order_.size()) shuffle();
      out.push_back(order_[cursor_++]);
    }
    return out;
  }
  void shuffle() {
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng_.below(i)]);
    cursor_ = 0;
  }

 private:
  std::vector<std::size_t> order_;
  Rng rng_;
  std::size_t cursor_ = 0;
};

namespace detail {

inline ParameterSet only_role(const ParameterSet& grads, Role r) { return grads.subset(role_prefix(r)); }

inline double adaptation_alignment(const NetworkBundle& b, const EmbeddingDataset& source,
                                   const FrameDataset& target, const AdaptConfig& c) {
  const std::size_t n = c.alignment_samples ? c.alignment_samples : target.count();
  const Tensor te = embed_all(b.params, first_rows(target.frames, n));
  const Tensor se = first_rows(source.embeddings, c.alignment_samples ? c.alignment_samples : source.count());
  return measure_alignment(te, se, c.alignment_projections, derive_seed(c.seed, {0xA119ULL}));
}

}  // namespace detail

enum class AdaptPhase { Autoencoder, Critic, Generator };

/// Observer called after every parameter update.
using AdaptObserver = std::function<void(AdaptPhase, const AdaptResult&)>;

/// Trains a fresh encoder/decoder/critic. Returns the adapted bundle; the
/// encoder is the only part meant for reuse.
inline AdaptResult adapt(const EmbeddingDataset& source, const FrameDataset& target, const AdaptConfig& c,
                         int action_count = 4, const AdaptObserver& observe = {}) {
  c.validate();
  if (source.count() == 0 || target.count() == 0) throw std::invalid_argument("adapt: empty dataset");
  AdaptResult r;
  r.bundle = build(kAdversarialRoles, action_count, derive_seed(c.seed, {0xADA9ULL}));
  if (c.objective == Objective::Wgan) clip_critic(r.bundle.params, c.clip);
  r.ae_opt = OptimizerState(AdamConfig{c.ae_lr, 0.9, 0.999, 1e-8});
  r.critic_opt = OptimizerState(AdamConfig{c.critic_lr, c.critic_beta1, 0.999, 1e-8});
  r.generator_opt = OptimizerState(AdamConfig{c.generator_lr, 0.9, 0.999, 1e-8});
  if (c.epochs == 0) return r;

  r.report.alignment_before = detail::adaptation_alignment(r.bundle, source, target, c);
  ParameterSet& p = r.bundle.params;
  const std::size_t bs = std::min(c.batch_size, target.count());
  const std::size_t batches = target.count() / bs;
  Sampler critic_source(source.count(), derive_seed(c.seed, {0x5005ULL}));
  Sampler critic_target(target.count(), derive_seed(c.seed, {0x7A76ULL}));
  Sampler epoch_order(target.count(), derive_seed(c.seed, {0xE70CULL}));

  for (int epoch = 1; epoch <= c.epochs; ++epoch) {
    EpochLosses el;
    el.epoch = epoch;
    epoch_order.shuffle();
    for (std::size_t j = 0; j < batches; ++j) {
      const Tensor x = take_rows(target.frames, epoch_order.next(bs));
      {  // autoencoder: encoder + decoder
        Tape t;
        Var loss = ae_loss(t, p, x);
        t.backward(loss);
        optimizer_update(p, t.gradients(), r.ae_opt);
        el.ae_loss += t.value(loss).item();
        if (observe) observe(AdaptPhase::Autoencoder, r);
      }
      for (int k = 0; k < c.critic_steps; ++k) {  // critic only
        const Tensor s = take_rows(source.embeddings, critic_source.next(bs));
        const Tensor z = take_rows(target.frames, critic_target.next(bs));
        Tape t;
        Var te = encode(t, p, t.input(z), false);
        Var loss = critic_loss(t, p, s, te, c.objective);
        t.backward(loss);
        optimizer_update(p, t.gradients(), r.critic_opt);
        if (c.objective == Objective::Wgan) clip_critic(p, c.clip);
        el.critic_loss += t.value(loss).item() / c.critic_steps;
        if (observe) observe(AdaptPhase::Critic, r);
      }
      {  // generator: encoder only
        Tape t;
        Var loss = generator_loss(t, p, x, c.objective);
        t.backward(loss);
        optimizer_update(p, t.gradients(), r.generator_opt);
        el.generator_loss += t.value(loss).item();
        if (observe) observe(AdaptPhase::Generator, r);
      }
    }
    const double nb = static_cast<double>(batches);
    el.ae_loss /= nb;
    el.critic_loss /= nb;
    el.generator_loss /= nb;
    el.alignment = detail::adaptation_alignment(r.bundle, source, target, c);
    r.report.epochs.push_back(el);
  }
  r.report.alignment_after = r.report.epochs.back().alignment;
  return r;
}

}  // namespace adaptrl
