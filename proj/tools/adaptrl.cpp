// Command-line front end for the experiment harness.
#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <optional>

#include "adaptrl/harness.hpp"

using namespace adaptrl;
namespace fs = std::filesystem;

namespace {

struct Flags {
  std::string config, env, source_env, target_env, variant, out;
  std::optional<std::uint64_t> seed;
  std::string seeds;
  std::optional<std::int64_t> frames;
  // subcommand options
  std::string checkpoint, embeddings, frame_data, encoder, donor, cache_dir, objective;
  std::optional<std::size_t> count;
  std::optional<int> epochs;
  double threshold = 5.0;
};

class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

ExperimentPlan make_plan(const Flags& f) {
  ExperimentPlan p;
  if (!f.config.empty()) apply_config_file(p, f.config);
  if (!f.source_env.empty()) p.source_env = parse_env_setting(f.source_env);
  if (!f.target_env.empty()) p.target_env = parse_env_setting(f.target_env);
  if (!f.seeds.empty()) p.seeds = parse_seed_list(f.seeds);
  if (f.seed) p.seeds = {*f.seed};
  if (!f.variant.empty()) p.variant = parse_variant(f.variant);
  if (!f.out.empty()) p.out = f.out;
  if (!f.donor.empty()) p.donor = f.donor;
  if (!f.cache_dir.empty()) p.cache_dir = f.cache_dir;
  if (f.epochs) p.adapt.epochs = *f.epochs;
  if (!f.objective.empty()) apply_setting(p, "objective", f.objective);
  return p;
}

GameId pick_env(const Flags& f, GameId fallback) { return f.env.empty() ? fallback : parse_env_setting(f.env); }

void log_line(const std::string& s) { std::cerr << s << "\n"; }

void write_training_outputs(const fs::path& out, const TrainResult& r, const std::string& ckpt_name) {
  save_checkpoint(r.bundle, out / ckpt_name);
  write_file_atomic(out / "episodes.csv", episodes_csv(r.episodes));
  for (Series s : kAllSeries)
    write_file_atomic(out / (std::string(to_string(s)) + ".csv"), trial_csv(r.records, 0, s));
  std::printf("episodes %zu  last-100 mean score %s\n", r.episodes.size(),
              format_double(recent_mean_score(r.episodes)).c_str());
}

int train_source(const Flags& f) {
  const ExperimentPlan p = make_plan(f);
  TrainerConfig c = p.trainer;
  c.seed = p.seeds.front();
  c.total_frames = f.frames.value_or(p.source_frames);
  const GameId env = pick_env(f, p.source_env);
  fs::create_directories(p.out);
  write_training_outputs(p.out, train(EnvironmentSpec::of(env), c), "source.aada");
  return 0;
}

int collect_embeddings(const Flags& f) {
  if (f.checkpoint.empty()) throw UsageError("collect-embeddings needs --checkpoint");
  const ExperimentPlan p = make_plan(f);
  const NetworkBundle b = load_checkpoint(f.checkpoint);
  const EmbeddingDataset ds = collect_source_embeddings(b, EnvironmentSpec::of(pick_env(f, p.source_env)),
                                                        f.count.value_or(p.embedding_count), p.seeds.front());
  save_embeddings(ds, p.out / "embeddings.aadd");
  std::printf("%zu embeddings -> %s\n", ds.count(), (p.out / "embeddings.aadd").string().c_str());
  return 0;
}

int collect_frames(const Flags& f) {
  const ExperimentPlan p = make_plan(f);
  const FrameDataset ds = collect_target_frames(EnvironmentSpec::of(pick_env(f, p.target_env)),
                                                f.count.value_or(p.frame_count), p.seeds.front());
  save_frames(ds, p.out / "frames.aadd");
  std::printf("%zu frames -> %s\n", ds.count(), (p.out / "frames.aadd").string().c_str());
  return 0;
}

int run_adapt(const Flags& f) {
  if (f.embeddings.empty() || f.frame_data.empty()) throw UsageError("adapt needs --embeddings and --frame-data");
  const ExperimentPlan p = make_plan(f);
  const EmbeddingDataset src = load_embeddings(f.embeddings);
  const FrameDataset tgt = load_frames(f.frame_data);
  AdaptConfig c = p.adapt;
  c.seed = p.seeds.front();
  const AdaptResult r = adapt(src, tgt, c, EnvironmentSpec::of(tgt.env).action_count);
  save_checkpoint(encoder_only(r.bundle), p.out / "encoder.aada");
  write_file_atomic(p.out / "adapt_report.csv", adapt_report_csv(r.report));
  std::printf("alignment before %s after %s\n", format_double(r.report.alignment_before).c_str(),
              format_double(r.report.alignment_after).c_str());
  return 0;
}

int train_target(const Flags& f) {
  const ExperimentPlan p = make_plan(f);
  const EnvironmentSpec spec = EnvironmentSpec::of(pick_env(f, p.target_env));
  TrainerConfig c = p.trainer;
  c.seed = p.seeds.front();
  c.total_frames = f.frames.value_or(p.target_frames);
  std::optional<NetworkBundle> encoder, donor;
  if (!f.encoder.empty()) encoder = load_checkpoint(f.encoder);
  if (!f.donor.empty()) donor = load_checkpoint(f.donor);
  if (encoder && !encoder->has(Role::Encoder)) throw FormatError(f.encoder + " has no encoder");
  const ParameterSet enc = encoder ? encoder->role_params(Role::Encoder) : ParameterSet{};
  NetworkBundle init = target_initialization(spec, c.seed, encoder ? &enc : nullptr, donor ? &*donor : nullptr);
  fs::create_directories(p.out);
  write_training_outputs(p.out, train(spec, c, std::move(init)), "target.aada");
  return 0;
}

int print_report(const RunSummary& s) {
  std::printf("variant %s  %s -> %s  threshold %s\n", s.variant.c_str(), s.source_env.c_str(),
              s.target_env.c_str(), format_double(s.threshold).c_str());
  std::printf("trial  seed  episodes  final_mean  frames_to_threshold  alignment_after\n");
  std::vector<double> reach;
  for (const TrialSummary& t : s.trials) {
    std::printf("%5d  %4llu  %8zu  %10.3f  %19lld  %s\n", t.trial, static_cast<unsigned long long>(t.seed),
                t.episodes, t.final_mean_score, static_cast<long long>(t.frames_to_threshold),
                t.alignment_after ? format_double(*t.alignment_after).c_str() : "-");
    if (t.frames_to_threshold >= 0) reach.push_back(static_cast<double>(t.frames_to_threshold));
  }
  if (reach.size() == s.trials.size() && !reach.empty())
    std::printf("median frames to threshold %s\n", format_double(median(reach)).c_str());
  else
    std::printf("threshold reached in %zu of %zu trials\n", reach.size(), s.trials.size());
  return 0;
}

int run_pipeline_cmd(const Flags& f, std::optional<Variant> force) {
  ExperimentPlan p = make_plan(f);
  if (force) p.variant = *force;
  if (f.frames) p.target_frames = *f.frames;
  if (!f.env.empty()) p.target_env = parse_env_setting(f.env);
  const PipelineResult r = run_pipeline(p, log_line);
  std::printf("manifest %s\n", r.manifest.string().c_str());
  return print_report(summarize_run(p.out, f.threshold));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial representation transfer for miniature pixel games"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--config", f.config, "key = value config file; flags override it");
  app.add_option("--env", f.env, "Environment for single-stage commands");
  app.add_option("--source-env", f.source_env, "Source environment");
  app.add_option("--target-env", f.target_env, "Target environment");
  app.add_option("--seed", f.seed, "Single seed");
  app.add_option("--seeds", f.seeds, "Comma-separated trial seeds");
  app.add_option("--frames", f.frames, "Frame budget of the training stage");
  app.add_option("--out", f.out, "Output directory");
  app.add_option("--variant", f.variant, "transfer, baseline or transfer+heads");

  auto* ts = app.add_subcommand("train-source", "Train an agent from scratch on the source game");
  auto* ce = app.add_subcommand("collect-embeddings", "Record encoder outputs of a trained agent");
  ce->add_option("--checkpoint", f.checkpoint, "Trained source checkpoint")->required();
  ce->add_option("--count", f.count, "Number of embeddings");
  auto* cf = app.add_subcommand("collect-frames", "Record observations under random play");
  cf->add_option("--count", f.count, "Number of frames");
  auto* ad = app.add_subcommand("adapt", "Train an encoder whose embeddings match the source set");
  ad->add_option("--embeddings", f.embeddings, "Embedding dataset")->required();
  ad->add_option("--frame-data", f.frame_data, "Frame dataset")->required();
  ad->add_option("--epochs", f.epochs, "Passes over the frame dataset");
  ad->add_option("--objective", f.objective, "wgan or vanilla-gan");
  auto* tt = app.add_subcommand("train-target", "Train on the target game from an adapted encoder");
  tt->add_option("--encoder", f.encoder, "Checkpoint holding the encoder to start from");
  tt->add_option("--donor", f.donor, "Checkpoint whose policy and value heads are grafted");
  auto* bl = app.add_subcommand("baseline", "Train on the target game from random weights, all seeds");
  auto* pl = app.add_subcommand("pipeline", "Run the full protocol for every seed");
  pl->add_option("--donor", f.donor, "Donor checkpoint for transfer+heads");
  pl->add_option("--cache-dir", f.cache_dir, "Shared cache of trained source agents");
  pl->add_option("--epochs", f.epochs, "Adaptation epochs");
  auto* rp = app.add_subcommand("report", "Summarize a pipeline output directory");
  for (auto* sub : {bl, pl, rp}) sub->add_option("--threshold", f.threshold, "Score threshold");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  try {
    if (*ts) return train_source(f);
    if (*ce) return collect_embeddings(f);
    if (*cf) return collect_frames(f);
    if (*ad) return run_adapt(f);
    if (*tt) return train_target(f);
    if (*bl) return run_pipeline_cmd(f, Variant::Baseline);
    if (*pl) return run_pipeline_cmd(f, std::nullopt);
    if (*rp) return print_report(summarize_run(f.out.empty() ? fs::path("runs") : fs::path(f.out), f.threshold));
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const ConfigError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
