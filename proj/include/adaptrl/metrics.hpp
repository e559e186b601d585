#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

namespace adaptrl {

enum class Series : std::uint8_t { ScoreVsBatches = 0, ScoreVsGames = 1, EpisodeFramesMa100 = 2 };
inline constexpr Series kAllSeries[] = {Series::ScoreVsBatches, Series::ScoreVsGames,
                                        Series::EpisodeFramesMa100};

inline std::string_view to_string(Series s) {
  switch (s) {
    case Series::ScoreVsBatches: return "score_vs_batches";
    case Series::ScoreVsGames: return "score_vs_games";
    case Series::EpisodeFramesMa100: return "ep_frames_ma100";
  }
  return "?";
}

/// One learning-curve sample.
struct CurveRecord {
  int trial = 0;
  Series series = Series::ScoreVsBatches;
  std::int64_t x = 0;
  double y = 0.0;
  friend bool operator==(const CurveRecord&, const CurveRecord&) = default;
};

struct AggregateCurve {
  Series series = Series::ScoreVsBatches;
  std::vector<std::int64_t> x;
  std::vector<double> mean;
  std::vector<double> stddev;  // population standard deviation
};

/// out[i] = mean(values[max(0, i-window+1) ..= i]); early entries average the
/// available prefix.
inline std::vector<double> moving_average(const std::vector<double>& values, std::size_t window = 100) {
  if (window == 0) throw std::invalid_argument("moving_average window must be >= 1");
  std::vector<double> out(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::size_t lo = i + 1 >= window ? i + 1 - window : 0;
    double acc = 0.0;
    for (std::size_t j = lo; j <= i; ++j) acc += values[j];
    out[i] = acc / static_cast<double>(i + 1 - lo);
  }
  return out;
}

/// Incremental form of moving_average for streaming use; produces the same
/// sums in the same order.
class MovingAverage {
 public:
  explicit MovingAverage(std::size_t window = 100) : window_(window) {
    if (window == 0) throw std::invalid_argument("moving_average window must be >= 1");
  }
  double push(double v) {
    values_.push_back(v);
    const std::size_t i = values_.size() - 1;
    const std::size_t lo = i + 1 >= window_ ? i + 1 - window_ : 0;
    double acc = 0.0;
    for (std::size_t j = lo; j <= i; ++j) acc += values_[j];
    return acc / static_cast<double>(i + 1 - lo);
  }
  std::size_t count() const { return values_.size(); }

 private:
  std::size_t window_;
  std::vector<double> values_;
};

/// Per-trial step curve for one series, x ascending.
struct TrialCurve {
  std::vector<std::int64_t> x;
  std::vector<double> y;
};

inline std::map<int, TrialCurve> split_by_trial(const std::vector<CurveRecord>& records, Series s) {
  std::map<int, TrialCurve> out;
  for (const CurveRecord& r : records) {
    if (r.series != s) continue;
    TrialCurve& c = out[r.trial];
    if (!c.x.empty() && r.x < c.x.back()) {
      throw std::invalid_argument("curve x must be non-decreasing within a trial");
    }
    c.x.push_back(r.x);
    c.y.push_back(r.y);
  }
  return out;
}

/// Aligns trials on the union of their x values with last-observation-carried-
/// forward and reports mean and population std per x. The grid starts at the
/// latest first-x across trials so every trial has an observation to carry.
inline AggregateCurve aggregate(const std::vector<CurveRecord>& records, Series series,
                                const std::vector<int>& trials) {
  const auto curves = split_by_trial(records, series);
  AggregateCurve out;
  out.series = series;
  if (trials.empty()) return out;
  std::int64_t start = 0;
  bool any = false;
  std::vector<std::int64_t> grid;
  for (int t : trials) {
    auto it = curves.find(t);
    if (it == curves.end() || it->second.x.empty()) {
      // a trial with no finished episode contributes nothing to align on
      if (curves.empty()) return out;
      throw std::invalid_argument("aggregate: trial " + std::to_string(t) + " has no " +
                                  std::string(to_string(series)) + " records");
    }
    start = any ? std::max(start, it->second.x.front()) : it->second.x.front();
    any = true;
    grid.insert(grid.end(), it->second.x.begin(), it->second.x.end());
  }
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  grid.erase(grid.begin(), std::lower_bound(grid.begin(), grid.end(), start));

  std::vector<std::size_t> cursor(trials.size(), 0);
  for (std::int64_t x : grid) {
    std::vector<double> vals(trials.size());
    for (std::size_t k = 0; k < trials.size(); ++k) {
      const TrialCurve& c = curves.at(trials[k]);
      std::size_t& i = cursor[k];
      while (i + 1 < c.x.size() && c.x[i + 1] <= x) ++i;
      vals[k] = c.y[i];
    }
    // shifted by the first value so identical trials give exactly that value
    // and a zero spread
    const double n = static_cast<double>(trials.size());
    double shift_sum = 0.0;
    for (double v : vals) shift_sum += v - vals[0];
    const double shift_mean = shift_sum / n;
    double sq = 0.0;
    for (double v : vals) sq += (v - vals[0] - shift_mean) * (v - vals[0] - shift_mean);
    out.x.push_back(x);
    out.mean.push_back(vals[0] + shift_mean);
    out.stddev.push_back(std::sqrt(sq / n));
  }
  return out;
}

/// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw std::invalid_argument("not a number: " + std::string(s));
  }
  return v;
}

inline std::string aggregate_csv(const AggregateCurve& c) {
  std::string out = "x,mean,std\n";
  for (std::size_t i = 0; i < c.x.size(); ++i) {
    out += std::to_string(c.x[i]) + "," + format_double(c.mean[i]) + "," +
           format_double(c.stddev[i]) + "\n";
  }
  return out;
}

inline std::string trial_csv(const std::vector<CurveRecord>& records, int trial, Series s) {
  std::string out = "x,y\n";
  for (const CurveRecord& r : records) {
    if (r.trial == trial && r.series == s) out += std::to_string(r.x) + "," + format_double(r.y) + "\n";
  }
  return out;
}

/// Parses a CSV written by aggregate_csv or trial_csv into rows of numbers.
inline std::vector<std::vector<double>> parse_csv(std::string_view text, std::string_view header) {
  std::vector<std::vector<double>> rows;
  std::size_t pos = text.find('\n');
  if (pos == std::string_view::npos || text.substr(0, pos) != header) {
    throw std::invalid_argument("unexpected CSV header");
  }
  ++pos;
  while (pos < text.size()) {
    const std::size_t end = text.find('\n', pos);
    const std::string_view line = text.substr(pos, end - pos);
    std::vector<double> row;
    std::size_t a = 0;
    while (true) {
      const std::size_t comma = line.find(',', a);
      row.push_back(parse_double(line.substr(a, comma - a)));
      if (comma == std::string_view::npos) break;
      a = comma + 1;
    }
    rows.push_back(std::move(row));
    if (end == std::string_view::npos) break;
    pos = end + 1;
  }
  return rows;
}

/// First x at which y >= threshold, or -1.
inline std::int64_t first_crossing(const TrialCurve& c, double threshold) {
  for (std::size_t i = 0; i < c.x.size(); ++i)
    if (c.y[i] >= threshold) return c.x[i];
  return -1;
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty sequence");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace adaptrl
