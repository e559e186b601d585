#include <gtest/gtest.h>

#include <algorithm>
#include <bit>
#include <filesystem>

#include "adaptrl/env.hpp"
#include "adaptrl/golden.hpp"

using namespace adaptrl;

namespace {

int pixels(const Frame& f) { return static_cast<int>(std::count(f.begin(), f.end(), 1)); }

constexpr GameId kGames[] = {GameId::MiniPong, GameId::MiniBreakout, GameId::MiniCourt};

}  // namespace

TEST(Environment, ResetIsDeterministic) {
  for (GameId g : kGames) {
    Environment a(EnvironmentSpec::of(g)), b(EnvironmentSpec::of(g));
    EXPECT_EQ(a.reset(42), b.reset(42));
    EXPECT_EQ(a.state(), b.state());
  }
}

TEST(Environment, ResetStacksIdenticalFrames) {
  for (GameId g : kGames) {
    Environment env(EnvironmentSpec::of(g));
    const Observation o = env.reset(3);
    EXPECT_EQ(o.frames[0], o.frames[1]);
    EXPECT_EQ(o.frames[1], render(env.state()));
  }
}

TEST(Environment, BreakoutResetHasAllBricks) {
  Environment env(EnvironmentSpec::of(GameId::MiniBreakout));
  env.reset(1);
  EXPECT_EQ(std::popcount(env.state().bricks), 30);
  EXPECT_EQ(env.state().lives, 3);
}

TEST(Environment, PongResetHasZeroTallies) {
  Environment env(EnvironmentSpec::of(GameId::MiniPong));
  env.reset(5);
  EXPECT_EQ(env.state().agent_points, 0);
  EXPECT_EQ(env.state().opponent_points, 0);
}

TEST(Environment, ActionCountsDiffer) {
  EXPECT_EQ(EnvironmentSpec::of(GameId::MiniPong).action_count, 3);
  EXPECT_EQ(EnvironmentSpec::of(GameId::MiniBreakout).action_count, 4);
  EXPECT_EQ(EnvironmentSpec::of(GameId::MiniCourt).action_count, 5);
  EXPECT_EQ(parse_game("mini-court"), GameId::MiniCourt);
  EXPECT_THROW(parse_game("mini-golf"), std::invalid_argument);
}

TEST(Environment, PongBallAdvancesByVelocity) {
  Environment env(EnvironmentSpec::of(GameId::MiniPong));
  env.reset(0);
  EnvironmentState s = env.state();
  s.ball_row = 8;
  s.ball_col = 10;
  s.ball_drow = 1;
  s.ball_dcol = 1;
  env.set_state(s);
  env.step(pong::Noop);
  EXPECT_EQ(env.state().ball_row, 9);
  EXPECT_EQ(env.state().ball_col, 11);
}

TEST(Environment, PongBallBouncesOffBottomWall) {
  Environment env(EnvironmentSpec::of(GameId::MiniPong));
  env.reset(0);
  EnvironmentState s = env.state();
  s.ball_row = 15;
  s.ball_col = 8;
  s.ball_drow = 1;
  s.ball_dcol = 1;
  env.set_state(s);
  env.step(pong::Noop);
  EXPECT_EQ(env.state().ball_drow, -1);
  EXPECT_EQ(env.state().ball_row, 14);
}

TEST(Environment, PongMissScoresForOpponent) {
  Environment env(EnvironmentSpec::of(GameId::MiniPong));
  env.reset(0);
  EnvironmentState s = env.state();
  s.ball_row = 2;
  s.ball_col = 18;
  s.ball_drow = -1;
  s.ball_dcol = 1;
  s.agent_row = 10;
  env.set_state(s);
  const StepResult r = env.step(pong::Noop);
  EXPECT_EQ(r.reward, -1.0);
  EXPECT_EQ(r.info.opponent_points, 1);
}

TEST(Environment, PongPaddleReturnsBall) {
  Environment env(EnvironmentSpec::of(GameId::MiniPong));
  env.reset(0);
  EnvironmentState s = env.state();
  s.ball_row = 10;
  s.ball_col = 18;
  s.ball_drow = 1;
  s.ball_dcol = 1;
  s.agent_row = 10;  // ball lands on the middle cell
  env.set_state(s);
  const StepResult r = env.step(pong::Noop);
  EXPECT_EQ(r.reward, 0.0);
  EXPECT_EQ(env.state().ball_dcol, -1);
  EXPECT_EQ(env.state().ball_drow, 1);
}

TEST(Environment, InvalidActionRejected) {
  Environment env(EnvironmentSpec::of(GameId::MiniPong));
  env.reset(0);
  EXPECT_THROW(env.step(3), std::out_of_range);
  EXPECT_THROW(env.step(-1), std::out_of_range);
}

TEST(Environment, StepAfterTerminalRejected) {
  Environment env(EnvironmentSpec::of(GameId::MiniBreakout));
  env.reset(0);
  EnvironmentState s = env.state();
  s.steps = 1000;
  env.set_state(s);
  EXPECT_TRUE(env.done());
  EXPECT_THROW(env.step(0), std::logic_error);
}

TEST(Environment, BreakoutRandomEpisodeRewardEqualsBricksCleared) {
  Environment env(EnvironmentSpec::of(GameId::MiniBreakout));
  env.reset(7);
  Rng rng(7);
  double total = 0.0;
  int steps = 0;
  while (!env.done()) {
    total += env.step(static_cast<int>(rng.below(4))).reward;
    ++steps;
  }
  EXPECT_LE(steps, 1000);
  EXPECT_EQ(total, 30 - env.state().bricks_remaining());
  EXPECT_GE(total, 0.0);
  EXPECT_LE(total, 30.0);
}

TEST(Render, EmptyBreakoutFieldShowsOnlyPaddle) {
  Environment env(EnvironmentSpec::of(GameId::MiniBreakout));
  env.reset(0);
  EnvironmentState s = env.state();
  s.bricks = 0;
  s.ball_held = true;
  const Frame f = render(s);
  EXPECT_EQ(pixels(f), breakout::kPaddleWidth);
  for (int k = 0; k < breakout::kPaddleWidth; ++k)
    EXPECT_EQ(f[static_cast<std::size_t>(breakout::kPaddleRow * kCols + s.agent_col + k)], 1);
}

TEST(Render, FreshBreakoutHasBricksAndPaddle) {
  Environment env(EnvironmentSpec::of(GameId::MiniBreakout));
  const Observation o = env.reset(0);
  EXPECT_EQ(pixels(o.frames[1]), 60 + 4);
}

TEST(Render, FramesAreBinary) {
  for (GameId g : kGames) {
    Environment env(EnvironmentSpec::of(g));
    Observation o = env.reset(11);
    Rng rng(11);
    for (int i = 0; i < 300 && !env.done(); ++i) {
      o = env.step(static_cast<int>(rng.below(static_cast<std::uint64_t>(env.spec().action_count)))).observation;
      for (const Frame& f : o.frames)
        for (std::uint8_t v : f) EXPECT_TRUE(v == 0 || v == 1);
    }
  }
}

TEST(Render, ObservationTensorLayout) {
  Environment env(EnvironmentSpec::of(GameId::MiniCourt));
  env.reset(2);
  const Observation o = env.step(court::Up).observation;
  const Tensor t = o.to_tensor();
  ASSERT_EQ(t.shape(), (Shape{1, 2, 16, 20}));
  for (std::size_t i = 0; i < kFramePixels; ++i) {
    EXPECT_EQ(t[i], o.frames[0][i]);
    EXPECT_EQ(t[kFramePixels + i], o.frames[1][i]);
  }
}

class EnvironmentInvariants : public ::testing::TestWithParam<GameId> {};

TEST_P(EnvironmentInvariants, RandomPlayRespectsStateContract) {
  const EnvironmentSpec spec = EnvironmentSpec::of(GetParam());
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Environment env(spec);
    Observation prev = env.reset(seed);
    Rng rng(seed + 100);
    double total = 0.0;
    int steps = 0;
    while (!env.done()) {
      const StepResult r = env.step(static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.action_count))));
      const EnvironmentState& s = env.state();
      ASSERT_TRUE(r.reward == -1.0 || r.reward == 0.0 || r.reward == 1.0);
      ASSERT_GE(s.ball_row, 0);
      ASSERT_LT(s.ball_row, kRows);
      ASSERT_GE(s.ball_col, 0);
      ASSERT_LT(s.ball_col, kCols);
      ASSERT_TRUE(s.ball_drow == 1 || s.ball_drow == -1);
      ASSERT_TRUE(s.ball_dcol == 1 || s.ball_dcol == -1);
      ASSERT_LE(s.bricks_remaining(), 30);
      ASSERT_EQ(r.observation.frames[0], prev.frames[1]);
      prev = r.observation;
      total += r.reward;
      ++steps;
    }
    EXPECT_LE(steps, 1000);
    switch (spec.id) {
      case GameId::MiniPong:
        EXPECT_GE(total, -5.0);
        EXPECT_LE(total, 5.0);
        break;
      case GameId::MiniBreakout: EXPECT_EQ(total, 30 - env.state().bricks_remaining()); break;
      case GameId::MiniCourt:
        EXPECT_GE(total, -3.0);
        EXPECT_LE(total, 3.0);
        break;
    }
  }
}

TEST_P(EnvironmentInvariants, ReplaysAreBitIdentical) {
  EXPECT_EQ(golden_trajectory(GetParam(), 9), golden_trajectory(GetParam(), 9));
  EXPECT_NE(golden_trajectory(GetParam(), 9), golden_trajectory(GetParam(), 10));
}

TEST_P(EnvironmentInvariants, MatchesStoredGoldenTrajectory) {
  for (std::uint64_t seed : {1ULL, 7ULL}) {
    const auto path = golden_path(ADAPTRL_GOLDEN_DIR, GetParam(), seed);
    ASSERT_TRUE(std::filesystem::exists(path)) << path;
    const auto stored = decode_golden(read_file(path));
    ASSERT_EQ(stored.size(), kGoldenSteps);
    const auto replay = golden_trajectory(GetParam(), seed);
    for (std::size_t i = 0; i < kGoldenSteps; ++i) {
      ASSERT_EQ(replay[i], stored[i]) << "first divergence at step " << i;
    }
  }
}

INSTANTIATE_TEST_SUITE_P(AllGames, EnvironmentInvariants, ::testing::ValuesIn(kGames),
                         [](const auto& info) {
                           std::string n(to_string(info.param));
                           std::replace(n.begin(), n.end(), '-', '_');
                           return n;
                         });

TEST(Court, SidesSwapAfterEveryPoint) {
  Environment env(EnvironmentSpec::of(GameId::MiniCourt));
  env.reset(4);
  Rng rng(4);
  int points = 0;
  bool side = env.state().agent_on_left;
  while (!env.done()) {
    const StepResult r = env.step(static_cast<int>(rng.below(5)));
    const EnvironmentState& s = env.state();
    if (r.reward != 0.0) {
      ++points;
      EXPECT_NE(s.agent_on_left, side);
      side = s.agent_on_left;
    }
    EXPECT_GE(s.agent_col, court::min_col(s.agent_on_left));
    EXPECT_LE(s.agent_col, court::max_col(s.agent_on_left));
  }
  EXPECT_GE(points, 3);
}

TEST(Court, AgentAtTheNetStaysInItsHalfAfterSwap) {
  Environment env(EnvironmentSpec::of(GameId::MiniCourt));
  std::uint64_t seed = 0;
  do env.reset(++seed);
  while (!env.state().agent_on_left);
  while (env.step(court::Right).reward == 0.0) {
  }
  EXPECT_FALSE(env.state().agent_on_left);
  EXPECT_EQ(env.state().agent_col, court::min_col(false));
}

TEST(Golden, EncodingRoundTrips) {
  const auto recs = golden_trajectory(GameId::MiniCourt, 3, 50);
  EXPECT_EQ(decode_golden(encode_golden(recs)), recs);
  std::string bytes = encode_golden(recs);
  bytes.pop_back();
  EXPECT_THROW(decode_golden(bytes), FormatError);
  bytes = encode_golden(recs);
  bytes[0] = 'X';
  EXPECT_THROW(decode_golden(bytes), FormatError);
}
