#pragma once

// Fixed architectures shared by every game:
//
//   encoder  [N,2,16,20] -conv(8,4x4,s2,p1)+relu-> [N,8,8,10]
//                        -conv(16,4x4,s2,p1)+relu-> [N,16,4,5] -flatten-> 320
//                        -dense(32)+tanh-> embedding [N,32]
//   decoder  32 -dense(320)+relu-> [N,16,4,5] -tconv(8)+relu-> [N,8,8,10]
//               -tconv(2)-> [N,2,16,20] (linear)
//   critic   32 -dense(64)+relu -dense(64)+relu -dense(1)
//   policy   32 -dense(action_count)  (softmax applied by consumers)
//   value    32 -dense(1)
//
// Parameter names carry their role as prefix ("encoder.conv1.weight"), so one
// ParameterSet holds a whole bundle and role subsets are prefix filters.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "adaptrl/autodiff.hpp"
#include "adaptrl/env.hpp"
#include "adaptrl/rng.hpp"
#include "adaptrl/tensor.hpp"

namespace adaptrl {

inline constexpr std::size_t kEmbeddingDim = 32;
inline constexpr std::size_t kCriticHidden = 64;
inline constexpr ConvGeometry kEncoderConv{2, 1};

enum class Role : unsigned { Encoder = 1, Decoder = 2, Critic = 4, Policy = 8, Value = 16 };
using RoleSet = unsigned;

inline constexpr RoleSet operator|(Role a, Role b) {
  return static_cast<RoleSet>(a) | static_cast<RoleSet>(b);
}
inline constexpr RoleSet operator|(RoleSet a, Role b) { return a | static_cast<RoleSet>(b); }
inline constexpr bool has_role(RoleSet set, Role r) { return (set & static_cast<RoleSet>(r)) != 0; }

inline constexpr RoleSet kAgentRoles = Role::Encoder | Role::Policy | Role::Value;
inline constexpr RoleSet kAdversarialRoles = Role::Encoder | Role::Decoder | Role::Critic;
inline constexpr RoleSet kAllRoles = kAgentRoles | Role::Decoder | Role::Critic;
inline constexpr Role kRoles[] = {Role::Encoder, Role::Decoder, Role::Critic, Role::Policy,
                                  Role::Value};

inline std::string role_prefix(Role r) {
  switch (r) {
    case Role::Encoder: return "encoder.";
    case Role::Decoder: return "decoder.";
    case Role::Critic: return "critic.";
    case Role::Policy: return "policy.";
    case Role::Value: return "value.";
  }
  return "?";
}

struct ParamSpec {
  std::string name;
  Shape shape;
  std::size_t fan_in = 0;  // 0 marks a bias (zero-initialized)
};

/// Parameter names, shapes and init fan-in for one role.
inline std::vector<ParamSpec> role_layout(Role role, int action_count) {
  const std::size_t a = static_cast<std::size_t>(action_count);
  const std::size_t flat = 16 * 4 * 5;
  switch (role) {
    case Role::Encoder:
      return {{"encoder.conv1.weight", {8, 2, 4, 4}, 2 * 16},
              {"encoder.conv1.bias", {8}, 0},
              {"encoder.conv2.weight", {16, 8, 4, 4}, 8 * 16},
              {"encoder.conv2.bias", {16}, 0},
              {"encoder.fc.weight", {kEmbeddingDim, flat}, flat},
              {"encoder.fc.bias", {kEmbeddingDim}, 0}};
    case Role::Decoder:
      return {{"decoder.fc.weight", {flat, kEmbeddingDim}, kEmbeddingDim},
              {"decoder.fc.bias", {flat}, 0},
              {"decoder.deconv1.weight", {16, 8, 4, 4}, 8 * 16},
              {"decoder.deconv1.bias", {8}, 0},
              {"decoder.deconv2.weight", {8, 2, 4, 4}, 2 * 16},
              {"decoder.deconv2.bias", {2}, 0}};
    case Role::Critic:
      return {{"critic.fc1.weight", {kCriticHidden, kEmbeddingDim}, kEmbeddingDim},
              {"critic.fc1.bias", {kCriticHidden}, 0},
              {"critic.fc2.weight", {kCriticHidden, kCriticHidden}, kCriticHidden},
              {"critic.fc2.bias", {kCriticHidden}, 0},
              {"critic.fc3.weight", {1, kCriticHidden}, kCriticHidden},
              {"critic.fc3.bias", {1}, 0}};
    case Role::Policy:
      return {{"policy.weight", {a, kEmbeddingDim}, kEmbeddingDim}, {"policy.bias", {a}, 0}};
    case Role::Value:
      return {{"value.weight", {1, kEmbeddingDim}, kEmbeddingDim}, {"value.bias", {1}, 0}};
  }
  throw std::invalid_argument("unknown role");
}

inline void check_action_count(int action_count) {
  if (action_count < 3 || action_count > 5) {
    throw std::invalid_argument("action_count must be 3, 4 or 5, got " +
                                std::to_string(action_count));
  }
}

/// Role-tagged parameters plus the metadata needed to rebuild them.
struct NetworkBundle {
  ParameterSet params;
  RoleSet roles = 0;
  int action_count = 3;
  std::uint64_t seed = 0;

  bool has(Role r) const { return has_role(roles, r); }
  ParameterSet role_params(Role r) const { return params.subset(role_prefix(r)); }

  friend bool operator==(const NetworkBundle&, const NetworkBundle&) = default;
};

/// Fresh parameters for one role. Each role draws from its own stream, so a
/// role's initial values do not depend on which other roles are built.
inline ParameterSet init_role(Role role, int action_count, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(role), 0x1417ULL}));
  ParameterSet out;
  for (const ParamSpec& spec : role_layout(role, action_count)) {
    Tensor t(spec.shape);
    if (spec.fan_in > 0) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
      for (double& v : t.data()) v = rng.uniform(-bound, bound);
    }
    out.insert(spec.name, std::move(t));
  }
  return out;
}

inline NetworkBundle build(RoleSet roles, int action_count, std::uint64_t seed) {
  check_action_count(action_count);
  NetworkBundle b;
  b.roles = roles;
  b.action_count = action_count;
  b.seed = seed;
  for (Role r : kRoles) {
    if (!has_role(roles, r)) continue;
    for (auto& [name, t] : init_role(r, action_count, seed)) b.params.insert(name, std::move(t));
  }
  return b;
}

/// Adds freshly initialized parameters for `role` if the bundle lacks them.
inline void ensure_role(NetworkBundle& b, Role role) {
  if (b.has(role)) return;
  for (auto& [name, t] : init_role(role, b.action_count, b.seed)) b.params.insert(name, std::move(t));
  b.roles = b.roles | role;
}

inline void drop_role(NetworkBundle& b, Role role) {
  for (const ParamSpec& spec : role_layout(role, b.action_count)) b.params.erase(spec.name);
  b.roles &= ~static_cast<RoleSet>(role);
}

// ---- forward passes on a tape ----

inline Var encode(Tape& t, const ParameterSet& p, Var obs, bool trainable = true) {
  auto w = [&](const char* n) { return t.param(p, n, trainable); };
  Var h = t.relu(t.conv2d(obs, w("encoder.conv1.weight"), w("encoder.conv1.bias"), kEncoderConv));
  h = t.relu(t.conv2d(h, w("encoder.conv2.weight"), w("encoder.conv2.bias"), kEncoderConv));
  return t.tanh(t.dense(t.flatten(h), w("encoder.fc.weight"), w("encoder.fc.bias")));
}

inline Var decode(Tape& t, const ParameterSet& p, Var embedding, bool trainable = true) {
  auto w = [&](const char* n) { return t.param(p, n, trainable); };
  const std::size_t n = t.value(embedding).dim(0);
  Var h = t.relu(t.dense(embedding, w("decoder.fc.weight"), w("decoder.fc.bias")));
  h = t.reshape(h, {n, 16, 4, 5});
  h = t.relu(t.conv_transpose2d(h, w("decoder.deconv1.weight"), w("decoder.deconv1.bias"),
                                kEncoderConv));
  return t.conv_transpose2d(h, w("decoder.deconv2.weight"), w("decoder.deconv2.bias"),
                            kEncoderConv);
}

/// Raw critic output [N, 1]. The vanilla-GAN objective reads it as a logit.
inline Var critic_score(Tape& t, const ParameterSet& p, Var embedding, bool trainable = true) {
  auto w = [&](const char* n) { return t.param(p, n, trainable); };
  Var h = t.relu(t.dense(embedding, w("critic.fc1.weight"), w("critic.fc1.bias")));
  h = t.relu(t.dense(h, w("critic.fc2.weight"), w("critic.fc2.bias")));
  return t.dense(h, w("critic.fc3.weight"), w("critic.fc3.bias"));
}

inline Var policy_logits(Tape& t, const ParameterSet& p, Var embedding, bool trainable = true) {
  return t.dense(embedding, t.param(p, "policy.weight", trainable),
                 t.param(p, "policy.bias", trainable));
}

inline Var state_value(Tape& t, const ParameterSet& p, Var embedding, bool trainable = true) {
  return t.dense(embedding, t.param(p, "value.weight", trainable),
                 t.param(p, "value.bias", trainable));
}

// ---- inference helpers ----

inline Tensor embed(const ParameterSet& p, const Tensor& observations) {
  Tape t;
  return t.value(encode(t, p, t.input(observations), false));
}

struct PolicyOutput {
  Tensor probabilities;  // [N, A]
  Tensor values;         // [N, 1]
};

inline PolicyOutput evaluate_policy(const ParameterSet& p, const Tensor& observations) {
  Tape t;
  Var e = encode(t, p, t.input(observations), false);
  Var probs = t.softmax(policy_logits(t, p, e, false));
  Var v = state_value(t, p, e, false);
  return {t.value(probs), t.value(v)};
}

// ---- grafting ----

/// Replaces the encoder of `target` with `encoder` (a ParameterSet holding the
/// encoder.* entries). Heads are left as they are.
inline NetworkBundle graft_encoder(NetworkBundle target, const ParameterSet& encoder) {
  ensure_role(target, Role::Encoder);
  for (const ParamSpec& spec : role_layout(Role::Encoder, target.action_count)) {
    target.params.assign(spec.name, encoder.at(spec.name));
  }
  return target;
}

/// Replaces the policy and value heads of `target`. The policy head must match
/// the target's action count.
inline NetworkBundle graft_heads(NetworkBundle target, const ParameterSet& policy,
                                 const ParameterSet& value) {
  const Tensor& pw = policy.at("policy.weight");
  if (pw.rank() != 2 || pw.dim(0) != static_cast<std::size_t>(target.action_count)) {
    throw ShapeError("graft_heads: donor policy head has " +
                     std::to_string(pw.rank() == 2 ? pw.dim(0) : 0) + " actions, target has " +
                     std::to_string(target.action_count));
  }
  ensure_role(target, Role::Policy);
  ensure_role(target, Role::Value);
  for (const ParamSpec& spec : role_layout(Role::Policy, target.action_count))
    target.params.assign(spec.name, policy.at(spec.name));
  for (const ParamSpec& spec : role_layout(Role::Value, target.action_count))
    target.params.assign(spec.name, value.at(spec.name));
  return target;
}

/// Batches observations into one [N, 2, 16, 20] tensor.
inline Tensor stack_observations(std::span<const Observation> obs) {
  Tensor t({obs.size(), 2, static_cast<std::size_t>(kRows), static_cast<std::size_t>(kCols)});
  for (std::size_t i = 0; i < obs.size(); ++i) {
    obs[i].write_to(t.data().subspan(i * kObservationSize, kObservationSize));
  }
  return t;
}

}  // namespace adaptrl
