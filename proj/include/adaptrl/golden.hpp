#pragma once

// Golden trajectories: 1000 fixed-width (action, reward, frame hash) records
// per (environment, seed), used to pin the dynamics.
//
//   magic "AADG"  version:u32  then per step: action:u8 reward:i8 hash:u64

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "adaptrl/checkpoint.hpp"
#include "adaptrl/env.hpp"
#include "adaptrl/rng.hpp"

namespace adaptrl {

inline constexpr Magic kGoldenMagic{'A', 'A', 'D', 'G'};
inline constexpr std::size_t kGoldenSteps = 1000;

struct GoldenRecord {
  std::uint8_t action = 0;
  std::int8_t reward = 0;
  std::uint64_t hash = 0;
  friend bool operator==(const GoldenRecord&, const GoldenRecord&) = default;
};

/// Uniform-random play from reset(seed); episodes restart with derived seeds.
inline std::vector<GoldenRecord> golden_trajectory(GameId game, std::uint64_t seed,
                                                   std::size_t steps = kGoldenSteps) {
  const EnvironmentSpec spec = EnvironmentSpec::of(game);
  Environment env(spec);
  Rng actions(derive_seed(seed, {0x601DULL}));
  std::uint64_t episode = 0;
  env.reset(seed);
  std::vector<GoldenRecord> out;
  out.reserve(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const int a = static_cast<int>(actions.below(static_cast<std::uint64_t>(spec.action_count)));
    const StepResult r = env.step(a);
    out.push_back({static_cast<std::uint8_t>(a), static_cast<std::int8_t>(r.reward),
                   frame_hash(r.observation.frames[1])});
    if (r.terminal) env.reset(derive_seed(seed, {0x601DULL, ++episode}));
  }
  return out;
}

inline std::string encode_golden(const std::vector<GoldenRecord>& records) {
  std::string out(kGoldenMagic.begin(), kGoldenMagic.end());
  detail::put_u(out, kContainerVersion, 4);
  for (const GoldenRecord& r : records) {
    detail::put_u(out, r.action, 1);
    detail::put_u(out, static_cast<std::uint8_t>(r.reward), 1);
    detail::put_u(out, r.hash, 8);
  }
  return out;
}

inline std::vector<GoldenRecord> decode_golden(std::string_view bytes) {
  detail::Reader in(bytes);
  if (in.bytes(4) != std::string_view(kGoldenMagic.data(), 4)) throw FormatError("bad golden magic");
  if (in.u(4) != kContainerVersion) throw FormatError("unsupported golden version");
  if (in.remaining() % 10 != 0) throw FormatError("golden file has a partial record");
  std::vector<GoldenRecord> out(in.remaining() / 10);
  for (GoldenRecord& r : out) {
    r.action = static_cast<std::uint8_t>(in.u(1));
    r.reward = static_cast<std::int8_t>(static_cast<std::uint8_t>(in.u(1)));
    r.hash = in.u(8);
  }
  return out;
}

inline std::filesystem::path golden_path(const std::filesystem::path& dir, GameId game, std::uint64_t seed) {
  return dir / (std::string(to_string(game)) + "_seed" + std::to_string(seed) + ".aadg");
}

}  // namespace adaptrl
