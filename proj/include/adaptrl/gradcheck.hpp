#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "adaptrl/autodiff.hpp"
#include "adaptrl/rng.hpp"

namespace adaptrl {

/// Builds a scalar loss on `tape` from parameters in `params`.
using LossBuilder = std::function<Var(Tape& tape, const ParameterSet& params)>;

struct GradCheckEntry {
  std::string name;
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;  // values at worst_index
  double numeric = 0.0;
  bool flagged = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_relative_error = 0.0;

  bool passed() const {
    return std::none_of(entries.begin(), entries.end(),
                        [](const GradCheckEntry& e) { return e.flagged; });
  }
  const GradCheckEntry& at(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return e;
    throw std::out_of_range("no gradient check entry for " + name);
  }
};

inline std::string worst_entry(const GradCheckReport& r) {
  const GradCheckEntry* w = nullptr;
  for (const auto& e : r.entries)
    if (!w || e.max_relative_error > w->max_relative_error) w = &e;
  if (!w) return "no entries";
  return w->name + "[" + std::to_string(w->worst_index) + "] analytic " + std::to_string(w->analytic) +
         " numeric " + std::to_string(w->numeric) + " rel " + std::to_string(w->max_relative_error);
}

/// Entries whose analytic and numeric magnitudes are both below this are
/// compared against it instead, so rounding noise on near-zero gradients is
/// not reported as a large relative error.
inline constexpr double kGradCheckFloor = 1e-6;

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
  return std::abs(analytic - numeric) / denom;
}

inline double evaluate_loss(const LossBuilder& build, const ParameterSet& params) {
  Tape tape;
  return tape.value(build(tape, params)).item();
}

/// Compares `analytic` against central differences (f(w+h) - f(w-h)) / 2h for
/// every entry of every parameter named in `analytic`.
inline GradCheckReport compare_with_finite_differences(const LossBuilder& build,
                                                       const ParameterSet& params,
                                                       const ParameterSet& analytic,
                                                       double step, double tolerance) {
  if (!(step > 0.0)) throw std::invalid_argument("finite difference step must be positive");
  ParameterSet probe = params;
  GradCheckReport report;
  for (const auto& [name, grad] : analytic) {
    Tensor& w = probe.at(name);
    GradCheckEntry entry;
    entry.name = name;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double saved = w[i];
      w[i] = saved + step;
      const double up = evaluate_loss(build, probe);
      w[i] = saved - step;
      const double down = evaluate_loss(build, probe);
      w[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double err = relative_error(grad[i], numeric);
      if (err > entry.max_relative_error || i == 0) {
        entry.max_relative_error = err;
        entry.worst_index = i;
        entry.analytic = grad[i];
        entry.numeric = numeric;
      }
    }
    entry.flagged = entry.max_relative_error > tolerance;
    report.max_relative_error = std::max(report.max_relative_error, entry.max_relative_error);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

/// Runs backward on the built loss and checks every trainable parameter it
/// touches.
inline GradCheckReport finite_difference_check(const LossBuilder& build,
                                               const ParameterSet& params, double step,
                                               double tolerance) {
  ParameterSet analytic;
  {
    Tape tape;
    Var loss = build(tape, params);
    tape.backward(loss);
    analytic = tape.gradients();
  }
  return compare_with_finite_differences(build, params, analytic, step, tolerance);
}

/// Fills every `*.bias` entry with uniform noise in [-scale, scale]. Zero
/// biases on sparse binary frames put many ReLU inputs exactly at the kink,
/// where central differences disagree with the one-sided analytic gradient.
inline void jitter_biases(ParameterSet& params, std::uint64_t seed, double scale = 0.1) {
  Rng rng(seed);
  for (auto& [name, t] : params)
    if (name.ends_with(".bias"))
      for (double& v : t.data()) v = rng.uniform(-scale, scale);
}

}  // namespace adaptrl
