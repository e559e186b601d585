#pragma once

// End-to-end experiment orchestration: source training (cached), dataset
// collection, adaptation, grafting, target training, aggregation, export.
//
// Output layout for a plan with output directory OUT:
//   OUT/manifest.json
//   OUT/<series>.csv                  x,mean,std per series
//   OUT/trial<k>/<series>.csv         x,y per trial
//   OUT/trial<k>/{source.aada, embeddings.aadd, frames.aadd, encoder.aada,
//                 target.aada, adapt_report.csv, episodes.csv}

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "adaptrl/a2c.hpp"
#include "adaptrl/adaptation.hpp"
#include "adaptrl/checkpoint.hpp"
#include "adaptrl/metrics.hpp"

namespace adaptrl {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Variant { Transfer, Baseline, TransferHeads };

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::Transfer: return "transfer";
    case Variant::Baseline: return "baseline";
    case Variant::TransferHeads: return "transfer+heads";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  if (s == "transfer") return Variant::Transfer;
  if (s == "baseline") return Variant::Baseline;
  if (s == "transfer+heads") return Variant::TransferHeads;
  throw ConfigError("unknown variant: " + std::string(s));
}

struct ExperimentPlan {
  GameId source_env = GameId::MiniPong;
  GameId target_env = GameId::MiniBreakout;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::int64_t source_frames = 2'000'000;
  std::int64_t target_frames = 2'000'000;
  std::size_t embedding_count = 10'000;
  std::size_t frame_count = 10'000;
  AdaptConfig adapt;
  TrainerConfig trainer;  // seed and total_frames are set per run
  Variant variant = Variant::Transfer;
  std::filesystem::path out = "runs";
  std::filesystem::path donor;      // transfer+heads only
  std::filesystem::path cache_dir;  // empty: OUT/source_cache

  int trials() const { return static_cast<int>(seeds.size()); }

  std::filesystem::path source_cache() const { return cache_dir.empty() ? out / "source_cache" : cache_dir; }

  void validate() const {
    if (seeds.empty()) throw ConfigError("seeds must not be empty");
    if (source_frames <= 0 || target_frames <= 0) throw ConfigError("frame budgets must be positive");
    if (embedding_count == 0 || frame_count == 0) throw ConfigError("dataset sizes must be positive");
    adapt.validate();
    TrainerConfig t = trainer;
    t.total_frames = 1;
    t.validate();
    if (variant == Variant::TransferHeads) {
      if (donor.empty()) throw ConfigError("variant transfer+heads needs a donor checkpoint");
      if (!std::filesystem::exists(donor)) throw IoError("donor checkpoint not found: " + donor.string());
    }
  }
};

// ---- config files ----

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

template <class T>
T parse_number(std::string_view key, std::string_view v) {
  T out{};
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size()) {
    throw ConfigError("bad value for " + std::string(key) + ": '" + std::string(v) + "'");
  }
  return out;
}

}  // namespace detail

/// `key = value` lines; `#` starts a comment. Later lines override earlier.
inline std::vector<std::pair<std::string, std::string>> parse_config_text(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string_view key = detail::trim(line.substr(0, eq));
    const std::string_view value = detail::trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    out.emplace_back(std::string(key), std::string(value));
  }
  return out;
}

inline std::vector<std::uint64_t> parse_seed_list(std::string_view v) {
  std::vector<std::uint64_t> out;
  while (!v.empty()) {
    const auto comma = v.find(',');
    const std::string_view item = detail::trim(v.substr(0, comma));
    out.push_back(detail::parse_number<std::uint64_t>("seeds", item));
    v = comma == std::string_view::npos ? std::string_view{} : v.substr(comma + 1);
  }
  if (out.empty()) throw ConfigError("seeds must not be empty");
  return out;
}

inline GameId parse_env_setting(std::string_view v) {
  try {
    return parse_game(v);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

inline void apply_setting(ExperimentPlan& p, std::string_view key, std::string_view v) {
  using detail::parse_number;
  if (key == "source_env") p.source_env = parse_env_setting(v);
  else if (key == "target_env") p.target_env = parse_env_setting(v);
  else if (key == "seeds") p.seeds = parse_seed_list(v);
  else if (key == "source_frames") p.source_frames = parse_number<std::int64_t>(key, v);
  else if (key == "target_frames") p.target_frames = parse_number<std::int64_t>(key, v);
  else if (key == "embedding_count") p.embedding_count = parse_number<std::size_t>(key, v);
  else if (key == "frame_count") p.frame_count = parse_number<std::size_t>(key, v);
  else if (key == "variant") p.variant = parse_variant(v);
  else if (key == "out") p.out = std::string(v);
  else if (key == "donor") p.donor = std::string(v);
  else if (key == "cache_dir") p.cache_dir = std::string(v);
  else if (key == "epochs") p.adapt.epochs = parse_number<int>(key, v);
  else if (key == "batch_size") p.adapt.batch_size = parse_number<std::size_t>(key, v);
  else if (key == "critic_steps") p.adapt.critic_steps = parse_number<int>(key, v);
  else if (key == "objective") {
    try {
      p.adapt.objective = parse_objective(v);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  else if (key == "clip") p.adapt.clip = parse_number<double>(key, v);
  else if (key == "ae_lr") p.adapt.ae_lr = parse_number<double>(key, v);
  else if (key == "critic_lr") p.adapt.critic_lr = parse_number<double>(key, v);
  else if (key == "generator_lr") p.adapt.generator_lr = parse_number<double>(key, v);
  else if (key == "critic_beta1") p.adapt.critic_beta1 = parse_number<double>(key, v);
  else if (key == "projections") p.adapt.alignment_projections = parse_number<int>(key, v);
  else if (key == "alignment_samples") p.adapt.alignment_samples = parse_number<std::size_t>(key, v);
  else if (key == "n_envs") p.trainer.n_envs = parse_number<int>(key, v);
  else if (key == "n_steps") p.trainer.n_steps = parse_number<int>(key, v);
  else if (key == "gamma") p.trainer.gamma = parse_number<double>(key, v);
  else if (key == "value_coef") p.trainer.value_coef = parse_number<double>(key, v);
  else if (key == "entropy_coef") p.trainer.entropy_coef = parse_number<double>(key, v);
  else if (key == "learning_rate") p.trainer.learning_rate = parse_number<double>(key, v);
  else if (key == "max_grad_norm") p.trainer.max_grad_norm = parse_number<double>(key, v);
  else throw ConfigError("unknown config key: " + std::string(key));
}

inline void apply_config_text(ExperimentPlan& p, std::string_view text) {
  for (const auto& [k, v] : parse_config_text(text)) apply_setting(p, k, v);
}

inline void apply_config_file(ExperimentPlan& p, const std::filesystem::path& path) {
  apply_config_text(p, read_file(path));
}

// ---- artifacts ----

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 0xF];
  return s;
}

inline std::string file_hash(const std::filesystem::path& p) { return hex64(fnv1a(read_file(p))); }

inline std::string episodes_csv(const std::vector<EpisodeStats>& eps) {
  std::string out = "episode,frames,score,frames_seen,batch\n";
  for (const EpisodeStats& e : eps) {
    out += std::to_string(e.episode) + "," + std::to_string(e.frames) + "," + format_double(e.score) + "," +
           std::to_string(e.frames_seen) + "," + std::to_string(e.batch) + "\n";
  }
  return out;
}

inline std::vector<EpisodeStats> parse_episodes_csv(std::string_view text, int trial = 0) {
  std::vector<EpisodeStats> out;
  for (const auto& row : parse_csv(text, "episode,frames,score,frames_seen,batch")) {
    if (row.size() != 5) throw FormatError("episodes csv needs 5 columns");
    EpisodeStats e;
    e.episode = static_cast<std::int64_t>(row[0]);
    e.frames = static_cast<int>(row[1]);
    e.score = row[2];
    e.frames_seen = static_cast<std::int64_t>(row[3]);
    e.batch = static_cast<std::int64_t>(row[4]);
    e.trial = trial;
    out.push_back(e);
  }
  return out;
}

/// Cache key for a trained source policy: environment, seed, budget and the
/// trainer settings that change the result.
inline std::string source_cache_key(GameId env, std::uint64_t seed, std::int64_t frames, const TrainerConfig& c) {
  std::ostringstream s;
  s << to_string(env) << ';' << seed << ';' << frames << ';' << c.n_envs << ';' << c.n_steps << ';'
    << format_double(c.gamma) << ';' << format_double(c.value_coef) << ';' << format_double(c.entropy_coef)
    << ';' << format_double(c.learning_rate) << ';' << format_double(c.max_grad_norm);
  return hex64(fnv1a(s.str()));
}

struct SourcePolicy {
  NetworkBundle bundle;
  std::vector<EpisodeStats> episodes;
  std::filesystem::path checkpoint;
  bool from_cache = false;
};

using Logger = std::function<void(const std::string&)>;

/// Trains a source policy or loads it from the cache directory.
inline SourcePolicy cached_source(GameId env, std::uint64_t seed, std::int64_t frames, TrainerConfig c,
                                  const std::filesystem::path& cache_dir, const Logger& log = {}) {
  c.seed = seed;
  c.total_frames = frames;
  const std::string stem =
      std::string(to_string(env)) + "_seed" + std::to_string(seed) + "_" + source_cache_key(env, seed, frames, c);
  SourcePolicy s;
  s.checkpoint = cache_dir / (stem + ".aada");
  const std::filesystem::path eps = cache_dir / (stem + "_episodes.csv");
  if (std::filesystem::exists(s.checkpoint) && std::filesystem::exists(eps)) {
    s.bundle = load_checkpoint(s.checkpoint);
    s.episodes = parse_episodes_csv(read_file(eps));
    s.from_cache = true;
    if (log) log("source " + stem + " loaded from cache");
    return s;
  }
  if (log) log("training source " + std::string(to_string(env)) + " seed " + std::to_string(seed));
  TrainResult r = train(EnvironmentSpec::of(env), c);
  write_file_atomic(eps, episodes_csv(r.episodes));
  save_checkpoint(r.bundle, s.checkpoint);
  s.bundle = std::move(r.bundle);
  s.episodes = std::move(r.episodes);
  return s;
}

/// Keeps only the encoder of an adapted bundle.
inline NetworkBundle encoder_only(NetworkBundle b) {
  drop_role(b, Role::Decoder);
  drop_role(b, Role::Critic);
  return b;
}

/// Initial target bundle: fresh heads drawn exactly as `train` would draw
/// them, with the encoder (and optionally the heads) replaced.
inline NetworkBundle target_initialization(const EnvironmentSpec& target, std::uint64_t seed,
                                           const ParameterSet* encoder, const NetworkBundle* donor) {
  NetworkBundle b = build(kAgentRoles, target.action_count, derive_seed(seed, {0xB0DEULL}));
  if (encoder) b = graft_encoder(std::move(b), *encoder);
  if (donor) b = graft_heads(std::move(b), donor->role_params(Role::Policy), donor->role_params(Role::Value));
  return b;
}

// Seeds of the per-trial stages, all derived from the trial seed. The target
// trainer uses the trial seed itself in every variant so runs are paired.
inline std::uint64_t embedding_seed(std::uint64_t s) { return derive_seed(s, {0xE1ULL}); }
inline std::uint64_t frame_seed(std::uint64_t s) { return derive_seed(s, {0xF1ULL}); }
inline std::uint64_t adapt_seed(std::uint64_t s) { return derive_seed(s, {0xADULL}); }

struct TrialOutcome {
  int trial = 0;
  std::uint64_t seed = 0;
  std::vector<EpisodeStats> source_episodes;  // empty for baseline
  std::optional<AdaptReport> adapt;
  std::vector<EpisodeStats> target_episodes;
  std::vector<CurveRecord> records;
  std::map<std::string, std::filesystem::path> artifacts;
  std::map<std::string, std::filesystem::path> reports;
};

struct PipelineResult {
  std::vector<TrialOutcome> trials;
  std::vector<AggregateCurve> aggregates;
  std::filesystem::path manifest;
};

inline std::filesystem::path trial_dir(const ExperimentPlan& p, int trial) {
  return p.out / ("trial" + std::to_string(trial));
}

inline TrialOutcome run_trial(const ExperimentPlan& p, int trial, const NetworkBundle* donor,
                              const Logger& log = {}) {
  const std::uint64_t seed = p.seeds.at(static_cast<std::size_t>(trial));
  const EnvironmentSpec target = EnvironmentSpec::of(p.target_env);
  const std::filesystem::path dir = trial_dir(p, trial);
  std::filesystem::create_directories(dir);
  TrialOutcome o;
  o.trial = trial;
  o.seed = seed;

  std::optional<NetworkBundle> init;
  if (p.variant != Variant::Baseline) {
    SourcePolicy src = cached_source(p.source_env, seed, p.source_frames, p.trainer, p.source_cache(), log);
    o.source_episodes = src.episodes;
    o.artifacts["source_checkpoint"] = dir / "source.aada";
    write_file_atomic(o.artifacts["source_checkpoint"], read_file(src.checkpoint));

    if (log) log("trial " + std::to_string(trial) + ": collecting datasets");
    const EmbeddingDataset emb = collect_source_embeddings(src.bundle, EnvironmentSpec::of(p.source_env),
                                                           p.embedding_count, embedding_seed(seed));
    o.artifacts["embeddings"] = dir / "embeddings.aadd";
    save_embeddings(emb, o.artifacts["embeddings"]);
    const FrameDataset frames = collect_target_frames(target, p.frame_count, frame_seed(seed));
    o.artifacts["frames"] = dir / "frames.aadd";
    save_frames(frames, o.artifacts["frames"]);

    if (log) log("trial " + std::to_string(trial) + ": adapting");
    AdaptConfig ac = p.adapt;
    ac.seed = adapt_seed(seed);
    AdaptResult ad = adapt(emb, frames, ac, target.action_count);
    const NetworkBundle enc = encoder_only(std::move(ad.bundle));
    o.artifacts["adapted_encoder"] = dir / "encoder.aada";
    save_checkpoint(enc, o.artifacts["adapted_encoder"]);
    o.reports["adapt_report"] = dir / "adapt_report.csv";
    write_file_atomic(o.reports["adapt_report"], adapt_report_csv(ad.report));
    o.adapt = ad.report;

    const ParameterSet encoder = enc.role_params(Role::Encoder);
    init = target_initialization(target, seed, &encoder,
                                 p.variant == Variant::TransferHeads ? donor : nullptr);
  }

  if (log) log("trial " + std::to_string(trial) + ": training " + std::string(to_string(p.target_env)));
  TrainerConfig tc = p.trainer;
  tc.seed = seed;
  tc.total_frames = p.target_frames;
  TrainResult r = train(target, tc, std::move(init), trial);
  o.artifacts["target_checkpoint"] = dir / "target.aada";
  save_checkpoint(r.bundle, o.artifacts["target_checkpoint"]);
  for (Series s : kAllSeries) {
    const std::string name(to_string(s));
    o.artifacts[name] = dir / (name + ".csv");
    write_file_atomic(o.artifacts[name], trial_csv(r.records, trial, s));
  }
  o.reports["episodes"] = dir / "episodes.csv";
  write_file_atomic(o.reports["episodes"], episodes_csv(r.episodes));
  o.target_episodes = std::move(r.episodes);
  o.records = std::move(r.records);
  return o;
}

namespace detail {

inline nlohmann::json file_entries(const ExperimentPlan& p, const std::map<std::string, std::filesystem::path>& m) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, path] : m) {
    j[name] = {{"path", std::filesystem::relative(path, p.out).generic_string()}, {"fnv1a64", file_hash(path)}};
  }
  return j;
}

}  // namespace detail

inline std::string manifest_json(const ExperimentPlan& p, const PipelineResult& r) {
  nlohmann::json j;
  j["variant"] = std::string(to_string(p.variant));
  j["source_env"] = std::string(to_string(p.source_env));
  j["target_env"] = std::string(to_string(p.target_env));
  j["seeds"] = p.seeds;
  j["source_frames"] = p.source_frames;
  j["target_frames"] = p.target_frames;
  std::map<std::string, std::filesystem::path> agg;
  for (Series s : kAllSeries) agg[std::string(to_string(s))] = p.out / (std::string(to_string(s)) + ".csv");
  j["aggregates"] = detail::file_entries(p, agg);
  j["trials"] = nlohmann::json::array();
  for (const TrialOutcome& t : r.trials) {
    j["trials"].push_back({{"trial", t.trial},
                           {"seed", t.seed},
                           {"artifacts", detail::file_entries(p, t.artifacts)},
                           {"reports", detail::file_entries(p, t.reports)}});
  }
  return j.dump(2) + "\n";
}

/// Runs every trial of the plan, aggregates the curves and writes the
/// manifest last.
inline PipelineResult run_pipeline(const ExperimentPlan& p, const Logger& log = {}) {
  p.validate();
  std::filesystem::create_directories(p.out);
  std::optional<NetworkBundle> donor;
  if (p.variant == Variant::TransferHeads) {
    donor = load_checkpoint(p.donor);
    if (donor->action_count != EnvironmentSpec::of(p.target_env).action_count) {
      throw ShapeError("donor checkpoint has " + std::to_string(donor->action_count) + " actions, " +
                       std::string(to_string(p.target_env)) + " has " +
                       std::to_string(EnvironmentSpec::of(p.target_env).action_count));
    }
    if (!donor->has(Role::Policy) || !donor->has(Role::Value)) {
      throw FormatError("donor checkpoint lacks policy/value heads");
    }
  }
  PipelineResult r;
  std::vector<CurveRecord> all;
  std::vector<int> ids;
  for (int k = 0; k < p.trials(); ++k) {
    r.trials.push_back(run_trial(p, k, donor ? &*donor : nullptr, log));
    all.insert(all.end(), r.trials.back().records.begin(), r.trials.back().records.end());
    ids.push_back(k);
  }
  for (Series s : kAllSeries) {
    r.aggregates.push_back(aggregate(all, s, ids));
    write_file_atomic(p.out / (std::string(to_string(s)) + ".csv"), aggregate_csv(r.aggregates.back()));
  }
  r.manifest = p.out / "manifest.json";
  write_file_atomic(r.manifest, manifest_json(p, r));
  return r;
}

// ---- reporting ----

struct TrialSummary {
  int trial = 0;
  std::uint64_t seed = 0;
  std::size_t episodes = 0;
  double final_mean_score = 0.0;
  std::int64_t frames_to_threshold = -1;
  std::optional<double> alignment_after;
};

struct RunSummary {
  std::string variant, source_env, target_env;
  double threshold = 0.0;
  std::vector<TrialSummary> trials;
};

/// Re-reads a pipeline output directory through its manifest.
inline RunSummary summarize_run(const std::filesystem::path& out, double threshold) {
  const nlohmann::json j = nlohmann::json::parse(read_file(out / "manifest.json"));
  RunSummary s;
  s.variant = j.at("variant").get<std::string>();
  s.source_env = j.at("source_env").get<std::string>();
  s.target_env = j.at("target_env").get<std::string>();
  s.threshold = threshold;
  for (const auto& t : j.at("trials")) {
    TrialSummary ts;
    ts.trial = t.at("trial").get<int>();
    ts.seed = t.at("seed").get<std::uint64_t>();
    const auto& reports = t.at("reports");
    const std::filesystem::path ep = out / reports.at("episodes").at("path").get<std::string>();
    if (file_hash(ep) != reports.at("episodes").at("fnv1a64").get<std::string>()) {
      throw FormatError(ep.string() + " does not match its manifest hash");
    }
    const auto eps = parse_episodes_csv(read_file(ep), ts.trial);
    ts.episodes = eps.size();
    ts.final_mean_score = recent_mean_score(eps);
    ts.frames_to_threshold = frames_to_threshold(eps, threshold);
    if (reports.contains("adapt_report")) {
      const auto rows = parse_csv(read_file(out / reports.at("adapt_report").at("path").get<std::string>()),
                                  "epoch,ae_loss,critic_loss,gen_loss,alignment");
      if (!rows.empty()) ts.alignment_after = rows.back()[4];
    }
    s.trials.push_back(ts);
  }
  return s;
}

}  // namespace adaptrl
