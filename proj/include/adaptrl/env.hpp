#pragma once

// Three deterministic ball-and-paddle games on a 16x20 binary grid.
//
//   mini-pong      agent paddle on the right edge, tracking opponent on the left
//   mini-breakout  paddle on the bottom row, 30 two-cell bricks on rows 2-4
//   mini-court     free movement in one half of a netted court; sides swap
//                  after every point
//
// Observations stack the previous and the current render.

#include <algorithm>
#include <array>
#include <bit>
#include <span>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#include "adaptrl/rng.hpp"
#include "adaptrl/tensor.hpp"

namespace adaptrl {

inline constexpr int kRows = 16;
inline constexpr int kCols = 20;
inline constexpr std::size_t kFramePixels = kRows * kCols;
inline constexpr std::size_t kObservationSize = 2 * kFramePixels;

enum class GameId : std::uint8_t { MiniPong = 0, MiniBreakout = 1, MiniCourt = 2 };

inline std::string_view to_string(GameId id) {
  switch (id) {
    case GameId::MiniPong: return "mini-pong";
    case GameId::MiniBreakout: return "mini-breakout";
    case GameId::MiniCourt: return "mini-court";
  }
  return "?";
}

inline GameId parse_game(std::string_view name) {
  if (name == "mini-pong") return GameId::MiniPong;
  if (name == "mini-breakout") return GameId::MiniBreakout;
  if (name == "mini-court") return GameId::MiniCourt;
  throw std::invalid_argument("unknown environment: " + std::string(name));
}

struct EnvironmentSpec {
  GameId id = GameId::MiniPong;
  int action_count = 3;
  int max_episode_steps = 1000;
  int points_to_win = 5;  // pong and court
  int lives = 0;          // breakout

  static EnvironmentSpec of(GameId id) {
    switch (id) {
      case GameId::MiniPong: return {id, 3, 1000, 5, 0};
      case GameId::MiniBreakout: return {id, 4, 1000, 0, 3};
      case GameId::MiniCourt: return {id, 5, 1000, 3, 0};
    }
    throw std::invalid_argument("unknown game id");
  }

  friend bool operator==(const EnvironmentSpec&, const EnvironmentSpec&) = default;
};

namespace pong {
inline constexpr int kPaddleHeight = 3;
inline constexpr int kAgentCol = kCols - 1;
inline constexpr int kOpponentCol = 0;
enum Action { Noop = 0, Up = 1, Down = 2 };
}  // namespace pong

namespace breakout {
inline constexpr int kPaddleWidth = 4;
inline constexpr int kPaddleRow = kRows - 1;
inline constexpr int kFirstBrickRow = 2;
inline constexpr int kBrickRows = 3;
inline constexpr int kBricksPerRow = 10;
inline constexpr int kBrickWidth = 2;
inline constexpr std::uint32_t kAllBricks = (1U << (kBrickRows * kBricksPerRow)) - 1U;
enum Action { Noop = 0, Left = 1, Right = 2, Fire = 3 };

inline constexpr bool brick_at(std::uint32_t bricks, int row, int col) {
  if (row < kFirstBrickRow || row >= kFirstBrickRow + kBrickRows || col < 0 || col >= kCols)
    return false;
  const int bit = (row - kFirstBrickRow) * kBricksPerRow + col / kBrickWidth;
  return (bricks >> bit) & 1U;
}
inline constexpr std::uint32_t clear_brick(std::uint32_t bricks, int row, int col) {
  const int bit = (row - kFirstBrickRow) * kBricksPerRow + col / kBrickWidth;
  return bricks & ~(1U << bit);
}
}  // namespace breakout

namespace court {
inline constexpr int kNetCol = 10;
inline constexpr int kAgentHeight = 2;
inline constexpr int kOpponentHeight = 3;
enum Action { Noop = 0, Up = 1, Down = 2, Left = 3, Right = 4 };

// Columns the agent may occupy on each side of the net.
inline constexpr int min_col(bool left_side) { return left_side ? 0 : kNetCol + 1; }
inline constexpr int max_col(bool left_side) { return left_side ? kNetCol - 1 : kCols - 1; }
inline constexpr int baseline(bool left_side) { return left_side ? 0 : kCols - 1; }
}  // namespace court

using Frame = std::array<std::uint8_t, kFramePixels>;

/// Two stacked frames: [0] previous render, [1] current render.
struct Observation {
  std::array<Frame, 2> frames{};

  /// Writes 640 values in {0, 1} laid out as [2, 16, 20].
  void write_to(std::span<double> out) const {
    for (std::size_t f = 0; f < 2; ++f)
      for (std::size_t i = 0; i < kFramePixels; ++i) out[f * kFramePixels + i] = frames[f][i];
  }
  Tensor to_tensor() const {
    Tensor t({1, 2, kRows, kCols});
    write_to(t.data());
    return t;
  }
  friend bool operator==(const Observation&, const Observation&) = default;
};

struct EnvironmentState {
  GameId game = GameId::MiniPong;
  int ball_row = 0;
  int ball_col = 0;
  int ball_drow = 1;
  int ball_dcol = 1;
  bool ball_held = false;   // breakout: ball rests on the paddle until fired
  int agent_row = 0;        // pong/court: top cell of the agent sprite
  int agent_col = 0;        // breakout: leftmost paddle cell; court: agent column
  int opponent_row = 0;     // top cell of the opponent paddle
  int opponent_col = 0;
  int lagged_ball_row = 0;  // court: ball row one step ago, seen by the opponent
  std::uint32_t bricks = 0;
  int lives = 0;
  int agent_points = 0;
  int opponent_points = 0;
  bool agent_on_left = true;  // court
  int steps = 0;
  Rng rng;

  int bricks_remaining() const { return std::popcount(bricks); }
  friend bool operator==(const EnvironmentState&, const EnvironmentState&) = default;
};

struct StepInfo {
  int agent_points = 0;
  int opponent_points = 0;
  int bricks_remaining = 0;
  int lives = 0;
};

struct StepResult {
  Observation observation;
  double reward = 0.0;
  bool terminal = false;
  StepInfo info;
};

inline std::uint64_t frame_hash(const Frame& frame) {
  // FNV-1a, 64-bit
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (std::uint8_t b : frame) {
    h ^= b;
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Rasterizes paddles, ball, bricks and net.
inline Frame render(const EnvironmentState& s) {
  Frame f{};
  auto set = [&f](int r, int c) {
    if (r >= 0 && r < kRows && c >= 0 && c < kCols) f[static_cast<std::size_t>(r * kCols + c)] = 1;
  };
  switch (s.game) {
    case GameId::MiniPong:
      for (int k = 0; k < pong::kPaddleHeight; ++k) {
        set(s.agent_row + k, pong::kAgentCol);
        set(s.opponent_row + k, pong::kOpponentCol);
      }
      set(s.ball_row, s.ball_col);
      break;
    case GameId::MiniBreakout:
      for (int r = breakout::kFirstBrickRow; r < breakout::kFirstBrickRow + breakout::kBrickRows; ++r)
        for (int c = 0; c < kCols; ++c)
          if (breakout::brick_at(s.bricks, r, c)) set(r, c);
      for (int k = 0; k < breakout::kPaddleWidth; ++k) set(breakout::kPaddleRow, s.agent_col + k);
      if (!s.ball_held) set(s.ball_row, s.ball_col);
      break;
    case GameId::MiniCourt:
      for (int r = 0; r < kRows; r += 2) set(r, court::kNetCol);
      for (int k = 0; k < court::kAgentHeight; ++k) set(s.agent_row + k, s.agent_col);
      for (int k = 0; k < court::kOpponentHeight; ++k) set(s.opponent_row + k, s.opponent_col);
      set(s.ball_row, s.ball_col);
      break;
  }
  return f;
}

namespace detail {

inline int step_toward(int from, int to) { return from < to ? from + 1 : from > to ? from - 1 : from; }

// Vertical velocity after touching a paddle: the outer cells deflect, the
// middle keeps the incoming direction.
inline int deflect(int contact, int length, int incoming) {
  if (contact == 0) return -1;
  if (contact == length - 1) return 1;
  return incoming;
}

// Advances one axis with reflection off [0, limit).
inline int reflect(int pos, int& vel, int limit) {
  int next = pos + vel;
  if (next < 0 || next >= limit) {
    vel = -vel;
    next = pos + vel;
  }
  return next;
}

inline void serve_pong(EnvironmentState& s) {
  s.ball_row = 4 + static_cast<int>(s.rng.below(8));
  s.ball_col = 9 + static_cast<int>(s.rng.below(2));
  s.ball_drow = s.rng.sign();
  s.ball_dcol = s.rng.sign();
}

inline void hold_ball(EnvironmentState& s) {
  s.ball_held = true;
  s.ball_row = breakout::kPaddleRow - 1;
  s.ball_col = s.agent_col + 1;
  s.ball_drow = -1;
  s.ball_dcol = 1;
}

inline void serve_court(EnvironmentState& s) {
  s.ball_row = 3 + static_cast<int>(s.rng.below(10));
  s.ball_col = court::kNetCol;
  s.ball_drow = s.rng.sign();
  // every point starts with the ball travelling toward the agent
  s.ball_dcol = s.agent_on_left ? -1 : 1;
  s.lagged_ball_row = s.ball_row;
}

inline double step_pong(EnvironmentState& s, int action) {
  using namespace pong;
  if (action == Up) s.agent_row = std::max(0, s.agent_row - 1);
  if (action == Down) s.agent_row = std::min(kRows - kPaddleHeight, s.agent_row + 1);
  // opponent moves every other step toward the ball
  if (s.steps % 2 == 0) {
    const int center = step_toward(s.opponent_row + 1, s.ball_row);
    s.opponent_row = std::clamp(center - 1, 0, kRows - kPaddleHeight);
  }
  const int next_row = reflect(s.ball_row, s.ball_drow, kRows);
  const int next_col = s.ball_col + s.ball_dcol;
  if (next_col == kAgentCol) {
    const int contact = next_row - s.agent_row;
    if (contact >= 0 && contact < kPaddleHeight) {
      s.ball_dcol = -1;
      s.ball_drow = deflect(contact, kPaddleHeight, s.ball_drow);
      return 0.0;
    }
    s.opponent_points += 1;
    serve_pong(s);
    return -1.0;
  }
  if (next_col == kOpponentCol) {
    const int contact = next_row - s.opponent_row;
    if (contact >= 0 && contact < kPaddleHeight) {
      s.ball_dcol = 1;
      s.ball_drow = deflect(contact, kPaddleHeight, s.ball_drow);
      return 0.0;
    }
    s.agent_points += 1;
    serve_pong(s);
    return 1.0;
  }
  s.ball_row = next_row;
  s.ball_col = next_col;
  return 0.0;
}

inline double step_breakout(EnvironmentState& s, int action) {
  using namespace breakout;
  if (action == Left) s.agent_col = std::max(0, s.agent_col - 1);
  if (action == Right) s.agent_col = std::min(kCols - kPaddleWidth, s.agent_col + 1);
  if (s.ball_held) {
    s.ball_col = s.agent_col + 1;
    if (action == Fire) {
      s.ball_held = false;
      s.ball_drow = -1;
      s.ball_dcol = s.rng.sign();
    }
    return 0.0;
  }
  const int next_col = reflect(s.ball_col, s.ball_dcol, kCols);
  int next_row = s.ball_row + s.ball_drow;
  if (next_row < 0) {
    s.ball_drow = 1;
    next_row = s.ball_row + 1;
  }
  if (brick_at(s.bricks, next_row, next_col)) {
    s.bricks = clear_brick(s.bricks, next_row, next_col);
    s.ball_drow = -s.ball_drow;
    return 1.0;
  }
  if (next_row == kPaddleRow) {
    const int contact = next_col - s.agent_col;
    if (contact >= 0 && contact < kPaddleWidth) {
      s.ball_drow = -1;
      s.ball_dcol = contact < kPaddleWidth / 2 ? -1 : 1;
      return 0.0;
    }
    s.lives -= 1;
    hold_ball(s);
    return 0.0;
  }
  s.ball_row = next_row;
  s.ball_col = next_col;
  return 0.0;
}

inline void swap_court_sides(EnvironmentState& s) {
  s.agent_on_left = !s.agent_on_left;
  s.agent_col = std::clamp(kCols - 1 - s.agent_col, court::min_col(s.agent_on_left), court::max_col(s.agent_on_left));
  s.opponent_col = court::baseline(!s.agent_on_left);
}

inline double step_court(EnvironmentState& s, int action) {
  using namespace court;
  const bool left = s.agent_on_left;
  if (action == Up) s.agent_row = std::max(0, s.agent_row - 1);
  if (action == Down) s.agent_row = std::min(kRows - kAgentHeight, s.agent_row + 1);
  if (action == Left) s.agent_col = std::max(min_col(left), s.agent_col - 1);
  if (action == Right) s.agent_col = std::min(max_col(left), s.agent_col + 1);
  // opponent reacts to where the ball was one step ago
  {
    const int center = step_toward(s.opponent_row + 1, s.lagged_ball_row);
    s.opponent_row = std::clamp(center - 1, 0, kRows - kOpponentHeight);
  }
  s.lagged_ball_row = s.ball_row;

  const int next_row = reflect(s.ball_row, s.ball_drow, kRows);
  const int next_col = s.ball_col + s.ball_dcol;
  // direction pointing at the agent's baseline
  const int toward_agent = left ? -1 : 1;
  if (s.ball_dcol == toward_agent && next_col == s.agent_col) {
    const int contact = next_row - s.agent_row;
    if (contact >= 0 && contact < kAgentHeight) {
      s.ball_dcol = -toward_agent;
      s.ball_drow = deflect(contact, kAgentHeight, s.ball_drow);
      return 0.0;
    }
  }
  if (s.ball_dcol == -toward_agent && next_col == s.opponent_col) {
    const int contact = next_row - s.opponent_row;
    if (contact >= 0 && contact < kOpponentHeight) {
      s.ball_dcol = toward_agent;
      s.ball_drow = deflect(contact, kOpponentHeight, s.ball_drow);
      return 0.0;
    }
  }
  if (next_col < 0 || next_col >= kCols) {
    const bool past_agent = (next_col < 0) == left;
    double reward = 0.0;
    if (past_agent) {
      s.opponent_points += 1;
      reward = -1.0;
    } else {
      s.agent_points += 1;
      reward = 1.0;
    }
    swap_court_sides(s);
    serve_court(s);
    return reward;
  }
  s.ball_row = next_row;
  s.ball_col = next_col;
  return 0.0;
}

}  // namespace detail

/// Deterministic initial state for (spec, seed).
inline EnvironmentState initial_state(const EnvironmentSpec& spec, std::uint64_t seed) {
  EnvironmentState s;
  s.game = spec.id;
  s.rng = Rng(derive_seed(seed, {static_cast<std::uint64_t>(spec.id), 0xE17ULL}));
  switch (spec.id) {
    case GameId::MiniPong:
      s.agent_row = (kRows - pong::kPaddleHeight) / 2;
      s.opponent_row = s.agent_row;
      s.opponent_col = pong::kOpponentCol;
      s.agent_col = pong::kAgentCol;
      detail::serve_pong(s);
      break;
    case GameId::MiniBreakout:
      s.agent_col = (kCols - breakout::kPaddleWidth) / 2;
      s.agent_row = breakout::kPaddleRow;
      s.bricks = breakout::kAllBricks;
      s.lives = spec.lives;
      detail::hold_ball(s);
      break;
    case GameId::MiniCourt:
      s.agent_on_left = s.rng.below(2) == 0;
      s.agent_row = (kRows - court::kAgentHeight) / 2;
      s.agent_col = s.agent_on_left ? 3 : kCols - 4;
      s.opponent_row = (kRows - court::kOpponentHeight) / 2;
      s.opponent_col = court::baseline(!s.agent_on_left);
      detail::serve_court(s);
      break;
  }
  return s;
}

/// One game instance. Owns its state and the previous render used for frame
/// stacking.
class Environment {
 public:
  explicit Environment(EnvironmentSpec spec) : spec_(spec) {}

  const EnvironmentSpec& spec() const noexcept { return spec_; }
  const EnvironmentState& state() const noexcept { return state_; }

  Observation reset(std::uint64_t seed) {
    state_ = initial_state(spec_, seed);
    last_ = render(state_);
    return Observation{{last_, last_}};
  }

  /// Replaces the state (tests, replays). The previous frame becomes the
  /// render of the new state.
  void set_state(const EnvironmentState& s) {
    state_ = s;
    last_ = render(state_);
  }

  bool done() const noexcept { return terminal(state_); }

  StepResult step(int action) {
    if (action < 0 || action >= spec_.action_count) {
      throw std::out_of_range("action " + std::to_string(action) + " invalid for " +
                              std::string(to_string(spec_.id)) + " (" +
                              std::to_string(spec_.action_count) + " actions)");
    }
    if (done()) throw std::logic_error("step() on a finished episode; call reset()");
    double reward = 0.0;
    switch (spec_.id) {
      case GameId::MiniPong: reward = detail::step_pong(state_, action); break;
      case GameId::MiniBreakout: reward = detail::step_breakout(state_, action); break;
      case GameId::MiniCourt: reward = detail::step_court(state_, action); break;
    }
    state_.steps += 1;
    StepResult out;
    const Frame current = render(state_);
    out.observation = Observation{{last_, current}};
    last_ = current;
    out.reward = reward;
    out.terminal = terminal(state_);
    out.info = {state_.agent_points, state_.opponent_points, state_.bricks_remaining(),
                state_.lives};
    return out;
  }

 private:
  bool terminal(const EnvironmentState& s) const {
    if (s.steps >= spec_.max_episode_steps) return true;
    switch (spec_.id) {
      case GameId::MiniPong:
      case GameId::MiniCourt:
        return s.agent_points >= spec_.points_to_win || s.opponent_points >= spec_.points_to_win;
      case GameId::MiniBreakout:
        return s.lives <= 0 || s.bricks == 0;
    }
    return true;
  }

  EnvironmentSpec spec_;
  EnvironmentState state_;
  Frame last_{};
};

}  // namespace adaptrl
