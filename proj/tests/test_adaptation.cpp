#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <list>
#include <set>

#include "adaptrl/adaptation.hpp"
#include "adaptrl/gradcheck.hpp"

using namespace adaptrl;

namespace {

Tensor random_embeddings(std::size_t n, Rng& rng, double scale = 0.9) {
  Tensor t({n, kEmbeddingDim});
  for (double& v : t.data()) v = rng.uniform(-scale, scale);
  return t;
}

// Critic with a constant output equal to `k`.
ParameterSet constant_critic(double k) {
  NetworkBundle b = build(kAdversarialRoles, 3, 1);
  b.params.at("critic.fc3.weight").fill(0.0);
  b.params.at("critic.fc3.bias").fill(k);
  return b.params;
}

EmbeddingDataset small_source(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  return {random_embeddings(n, rng), 0, seed};
}

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("adaptrl_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST(AeLoss, PerfectReconstructionIsZero) {
  const FrameDataset f = collect_target_frames(EnvironmentSpec::of(GameId::MiniBreakout), 4, 1);
  Tape t;
  Var x = t.input(f.frames);
  EXPECT_EQ(t.value(t.mse(x, f.frames)).item(), 0.0);
}

TEST(AeLoss, ZeroDecoderOnOnesFrameIsOne) {
  NetworkBundle b = build(kAdversarialRoles, 3, 2);
  for (const ParamSpec& s : role_layout(Role::Decoder, 3)) b.params.at(s.name).fill(0.0);
  Tape t;
  EXPECT_EQ(t.value(ae_loss(t, b.params, Tensor({2, 2, 16, 20}, 1.0))).item(), 1.0);
}

TEST(AeLoss, GradientMatchesFiniteDifferences) {
  const NetworkBundle b = build(kAdversarialRoles, 3, 3);
  const FrameDataset f = collect_target_frames(EnvironmentSpec::of(GameId::MiniCourt), 2, 3);
  ParameterSet p = b.params.subset("encoder.");
  for (const auto& [n, v] : b.params.subset("decoder.")) p.insert(n, v);
  jitter_biases(p, 3);
  auto loss = [&](Tape& t, const ParameterSet& q) { return ae_loss(t, q, f.frames); };
  // one decoder pre-activation sits within 1e-5 of zero for this seed
  const GradCheckReport r = finite_difference_check(loss, p, 1e-6, 1e-4);
  EXPECT_TRUE(r.passed()) << worst_entry(r);
}

TEST(CriticLoss, ConstantCriticWganIsZero) {
  Rng rng(1);
  const ParameterSet p = constant_critic(0.37);
  Tape t;
  Var te = t.input(random_embeddings(8, rng));
  EXPECT_EQ(t.value(critic_loss(t, p, random_embeddings(8, rng), te, Objective::Wgan)).item(), 0.0);
}

TEST(CriticLoss, VanillaAtHalfIsTwoLn2) {
  Rng rng(2);
  const ParameterSet p = constant_critic(0.0);
  Tape t;
  Var te = t.input(random_embeddings(8, rng));
  EXPECT_NEAR(t.value(critic_loss(t, p, random_embeddings(8, rng), te, Objective::VanillaGan)).item(),
              2.0 * std::log(2.0), 1e-15);
}

class CompositeGradients : public ::testing::TestWithParam<Objective> {};

TEST_P(CompositeGradients, CriticLossMatchesFiniteDifferences) {
  Rng rng(3);
  const NetworkBundle b = build(kAdversarialRoles, 3, 4);
  const Tensor s = random_embeddings(4, rng), z = random_embeddings(4, rng);
  auto loss = [&](Tape& t, const ParameterSet& q) { return critic_loss(t, q, s, t.input(z), GetParam()); };
  const GradCheckReport r = finite_difference_check(loss, b.params.subset("critic."), 1e-5, 1e-4);
  EXPECT_TRUE(r.passed()) << worst_entry(r);
}

TEST_P(CompositeGradients, GeneratorLossThroughEncoderMatchesFiniteDifferences) {
  NetworkBundle b = build(kAdversarialRoles, 3, 5);
  jitter_biases(b.params, 5);
  const FrameDataset f = collect_target_frames(EnvironmentSpec::of(GameId::MiniBreakout), 3, 5);
  const ParameterSet critic = b.params.subset("critic.");
  std::list<ParameterSet> merged;  // tapes hold pointers into these
  auto loss = [&](Tape& t, const ParameterSet& enc) {
    ParameterSet& all = merged.emplace_back(enc);
    for (const auto& [n, v] : critic) all.insert(n, v);
    return generator_loss(t, all, f.frames, GetParam());
  };
  const GradCheckReport r = finite_difference_check(loss, b.params.subset("encoder."), 1e-5, 1e-4);
  EXPECT_TRUE(r.passed()) << worst_entry(r);
}

TEST_P(CompositeGradients, EncoderPlusCriticCompositeBelowTolerance) {
  const NetworkBundle b = build(kAdversarialRoles, 3, 6);
  const FrameDataset f = collect_target_frames(EnvironmentSpec::of(GameId::MiniPong), 3, 6);
  Rng rng(6);
  const Tensor s = random_embeddings(3, rng);
  ParameterSet p = b.params.subset("encoder.");
  for (const auto& [n, v] : b.params.subset("critic.")) p.insert(n, v);
  jitter_biases(p, 6);
  auto loss = [&](Tape& t, const ParameterSet& q) {
    return critic_loss(t, q, s, encode(t, q, t.input(f.frames)), GetParam());
  };
  const GradCheckReport r = finite_difference_check(loss, p, 1e-5, 1e-4);
  EXPECT_LT(r.max_relative_error, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Objectives, CompositeGradients,
                         ::testing::Values(Objective::Wgan, Objective::VanillaGan),
                         [](const auto& info) { return info.param == Objective::Wgan ? "wgan" : "vanilla"; });

TEST(GeneratorLoss, ConstantCriticGivesMinusKAndNoGradient) {
  ParameterSet p = constant_critic(0.8);
  const NetworkBundle enc = build(kAdversarialRoles, 3, 7);
  for (const auto& [n, v] : enc.params.subset("encoder.")) p.assign(n, v);
  const FrameDataset f = collect_target_frames(EnvironmentSpec::of(GameId::MiniBreakout), 5, 7);
  Tape t;
  Var loss = generator_loss(t, p, f.frames, Objective::Wgan);
  EXPECT_DOUBLE_EQ(t.value(loss).item(), -0.8);
  t.backward(loss);
  for (const auto& [name, g] : t.gradients()) {
    EXPECT_EQ(name.rfind("encoder.", 0), 0u);
    EXPECT_EQ(max_abs(g), 0.0) << name;
  }
}

TEST(GradientRouting, EachLossReachesOnlyItsRoles) {
  const NetworkBundle b = build(kAdversarialRoles, 3, 8);
  const FrameDataset f = collect_target_frames(EnvironmentSpec::of(GameId::MiniBreakout), 4, 8);
  Rng rng(8);
  const Tensor s = random_embeddings(4, rng);
  auto roles_of = [](const ParameterSet& g) {
    std::set<std::string> out;
    for (const auto& [n, v] : g) out.insert(n.substr(0, n.find('.')));
    return out;
  };
  {
    Tape t;
    Var l = ae_loss(t, b.params, f.frames);
    t.backward(l);
    EXPECT_EQ(roles_of(t.gradients()), (std::set<std::string>{"decoder", "encoder"}));
  }
  for (Objective o : {Objective::Wgan, Objective::VanillaGan}) {
    Tape t;
    Var l = critic_loss(t, b.params, s, encode(t, b.params, t.input(f.frames), false), o);
    t.backward(l);
    EXPECT_EQ(roles_of(t.gradients()), (std::set<std::string>{"critic"}));
    Tape g;
    Var gl = generator_loss(g, b.params, f.frames, o);
    g.backward(gl);
    EXPECT_EQ(roles_of(g.gradients()), (std::set<std::string>{"encoder"}));
  }
}

TEST(Adapt, ZeroEpochsReturnsFreshEncoder) {
  AdaptConfig c;
  c.epochs = 0;
  c.seed = 4;
  const FrameDataset f = collect_target_frames(EnvironmentSpec::of(GameId::MiniBreakout), 64, 1);
  const AdaptResult r = adapt(small_source(64, 1), f, c);
  EXPECT_TRUE(r.report.epochs.empty());
  const NetworkBundle fresh = build(kAdversarialRoles, 4, derive_seed(4, {0xADA9ULL}));
  EXPECT_EQ(r.bundle.role_params(Role::Encoder), fresh.role_params(Role::Encoder));
  EXPECT_EQ(r.ae_opt.step + r.critic_opt.step + r.generator_opt.step, 0u);
}

TEST(Adapt, OneBatchStepCountsAndClipping) {
  AdaptConfig c;
  c.epochs = 1;
  c.batch_size = 64;
  c.critic_steps = 5;
  const FrameDataset f = collect_target_frames(EnvironmentSpec::of(GameId::MiniBreakout), 64, 2);
  std::vector<AdaptPhase> phases;
  double worst_critic = 0.0;
  ParameterSet critic_before_generator;
  bool critic_frozen = true;
  const AdaptResult r = adapt(small_source(100, 2), f, c, 4, [&](AdaptPhase ph, const AdaptResult& s) {
    phases.push_back(ph);
    if (ph == AdaptPhase::Critic) {
      for (const auto& [n, v] : s.bundle.role_params(Role::Critic)) worst_critic = std::max(worst_critic, max_abs(v));
      critic_before_generator = s.bundle.role_params(Role::Critic);
    }
    if (ph == AdaptPhase::Generator) critic_frozen = critic_before_generator == s.bundle.role_params(Role::Critic);
  });
  EXPECT_EQ(r.ae_opt.step, 1u);
  EXPECT_EQ(r.critic_opt.step, 5u);
  EXPECT_EQ(r.generator_opt.step, 1u);
  const std::vector<AdaptPhase> expected{AdaptPhase::Autoencoder, AdaptPhase::Critic,    AdaptPhase::Critic,
                                         AdaptPhase::Critic,      AdaptPhase::Critic,    AdaptPhase::Critic,
                                         AdaptPhase::Generator};
  EXPECT_EQ(phases, expected);
  EXPECT_LE(worst_critic, 0.01);
  EXPECT_TRUE(critic_frozen);
  ASSERT_EQ(r.report.epochs.size(), 1u);
  EXPECT_GE(r.report.epochs[0].ae_loss, 0.0);
}

TEST(Adapt, DecoderUntouchedByAdversarialSteps) {
  AdaptConfig c;
  c.epochs = 1;
  c.batch_size = 32;
  const FrameDataset f = collect_target_frames(EnvironmentSpec::of(GameId::MiniBreakout), 64, 3);
  ParameterSet decoder_after_ae;
  bool decoder_stable = true;
  adapt(small_source(64, 3), f, c, 4, [&](AdaptPhase ph, const AdaptResult& s) {
    if (ph == AdaptPhase::Autoencoder) decoder_after_ae = s.bundle.role_params(Role::Decoder);
    else decoder_stable = decoder_stable && decoder_after_ae == s.bundle.role_params(Role::Decoder);
  });
  EXPECT_TRUE(decoder_stable);
}

TEST(Adapt, IsDeterministic) {
  AdaptConfig c;
  c.epochs = 2;
  c.batch_size = 32;
  c.seed = 11;
  const FrameDataset f = collect_target_frames(EnvironmentSpec::of(GameId::MiniBreakout), 96, 4);
  const EmbeddingDataset s = small_source(80, 4);
  const AdaptResult a = adapt(s, f, c);
  const AdaptResult b = adapt(s, f, c);
  EXPECT_EQ(a.bundle, b.bundle);
  EXPECT_EQ(adapt_report_csv(a.report), adapt_report_csv(b.report));
  for (const EpochLosses& e : a.report.epochs) {
    EXPECT_GE(e.ae_loss, 0.0);
    EXPECT_TRUE(std::isfinite(e.critic_loss));
    EXPECT_TRUE(std::isfinite(e.generator_loss));
  }
}

TEST(Adapt, VanillaVariantRuns) {
  AdaptConfig c;
  c.epochs = 1;
  c.batch_size = 32;
  c.objective = Objective::VanillaGan;
  const FrameDataset f = collect_target_frames(EnvironmentSpec::of(GameId::MiniBreakout), 64, 5);
  const AdaptResult r = adapt(small_source(64, 5), f, c);
  EXPECT_EQ(r.critic_opt.step, 10u);
  EXPECT_TRUE(std::isfinite(r.report.epochs[0].critic_loss));
}

TEST(Adapt, RejectsBadConfig) {
  const FrameDataset f = collect_target_frames(EnvironmentSpec::of(GameId::MiniBreakout), 8, 5);
  AdaptConfig c;
  c.critic_steps = 0;
  EXPECT_THROW(adapt(small_source(8, 1), f, c), std::invalid_argument);
  c = AdaptConfig{};
  c.clip = 0.0;
  EXPECT_THROW(adapt(small_source(8, 1), f, c), std::invalid_argument);
}

TEST(Alignment, IdenticalSetsGiveZero) {
  Rng rng(9);
  const Tensor a = random_embeddings(200, rng);
  EXPECT_EQ(measure_alignment(a, a, 64, 1), 0.0);
}

TEST(Alignment, IsSymmetric) {
  Rng rng(10);
  const Tensor a = random_embeddings(300, rng), b = random_embeddings(170, rng, 0.5);
  EXPECT_EQ(measure_alignment(a, b, 50, 3), measure_alignment(b, a, 50, 3));
  const Tensor c = random_embeddings(300, rng, 0.4);
  EXPECT_EQ(measure_alignment(a, c, 50, 3), measure_alignment(c, a, 50, 3));
}

TEST(Alignment, AxisShiftMatchesClosedForm) {
  Rng rng(11);
  const double delta = 0.3;
  const Tensor a = random_embeddings(400, rng);
  Tensor b = a;
  for (std::size_t r = 0; r < b.dim(0); ++r) b[r * kEmbeddingDim + 5] += delta;
  // E|u_k| for u uniform on the unit sphere in d dimensions
  const double d = static_cast<double>(kEmbeddingDim);
  const double e_abs = std::exp(std::lgamma(d / 2.0) - std::lgamma((d + 1.0) / 2.0)) / std::sqrt(M_PI);
  const double expected = delta * e_abs;
  EXPECT_NEAR(measure_alignment(a, b, 512, 12), expected, 0.05 * expected);
}

TEST(Alignment, UnequalSizesUseEmpiricalCdfs) {
  std::vector<double> a{0.0, 1.0}, b{0.0, 0.0, 1.0, 1.0};
  EXPECT_EQ(wasserstein_1d(a, b), 0.0);
  std::vector<double> c{0.0}, d{1.0, 3.0};
  EXPECT_DOUBLE_EQ(wasserstein_1d(c, d), 2.0);
}

TEST(Datasets, TargetFramesAreBinaryAndDeterministic) {
  const auto a = collect_target_frames(EnvironmentSpec::of(GameId::MiniBreakout), 1000, 3);
  const auto b = collect_target_frames(EnvironmentSpec::of(GameId::MiniBreakout), 1000, 3);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.count(), 1000u);
  for (double v : a.frames.data()) ASSERT_TRUE(v == 0.0 || v == 1.0);
}

TEST(Datasets, SourceEmbeddingsBoundedAndDeterministic) {
  const NetworkBundle src = build(kAgentRoles, 3, 12);
  const auto a = collect_source_embeddings(src, EnvironmentSpec::of(GameId::MiniPong), 1000, 5);
  const auto b = collect_source_embeddings(src, EnvironmentSpec::of(GameId::MiniPong), 1000, 5);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a.count(), 1000u);
  EXPECT_EQ(a.source_hash, parameter_hash(src.params));
  for (double v : a.embeddings.data()) ASSERT_LT(std::abs(v), 1.0);
  EXPECT_THROW(collect_source_embeddings(src, EnvironmentSpec::of(GameId::MiniCourt), 10, 5), ShapeError);
}

TEST(Datasets, PersistenceRoundTripAndTruncation) {
  const auto dir = temp_dir("datasets");
  const auto frames = collect_target_frames(EnvironmentSpec::of(GameId::MiniCourt), 100, 6);
  const auto emb = collect_source_embeddings(build(kAgentRoles, 3, 6), EnvironmentSpec::of(GameId::MiniPong), 100, 6);
  save_frames(frames, dir / "f.aadd");
  save_embeddings(emb, dir / "e.aadd");
  EXPECT_EQ(load_frames(dir / "f.aadd"), frames);
  EXPECT_EQ(load_embeddings(dir / "e.aadd"), emb);
  EXPECT_THROW(load_embeddings(dir / "f.aadd"), FormatError);
  EXPECT_THROW(load_checkpoint(dir / "f.aadd"), FormatError);
  std::filesystem::resize_file(dir / "e.aadd", std::filesystem::file_size(dir / "e.aadd") - 1);
  EXPECT_THROW(load_embeddings(dir / "e.aadd"), FormatError);
}
