#pragma once

// Stair-step bound cloud for FCNN runs. Raw YES values are computed at every
// monitoring epoch; the displayed stair only moves at the first epoch where
// the training loss drops below the active stair, at which point the tightest
// bound available at that epoch becomes the next stair.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace yesbound::fcnn {

struct BoundPoint {
  std::int64_t epoch = 0;
  double train = 0.0;
  double yes0 = 0.0;
  std::optional<double> yesk;  // min over intermediate layers (absent when K < 2)
  std::vector<double> yes_j;   // per intermediate layer j = 1..K-1
};

struct Stair {
  double value = 0.0;
  std::int64_t activated_epoch = 0;
  std::optional<std::int64_t> crossed_epoch;
  std::string source;  // "YES-0" or "YES-k"
};

struct StairSeries {
  std::vector<Stair> stairs;
  std::vector<double> active_value;  // per raw point, after that epoch's update

  std::size_t crossings() const {
    return static_cast<std::size_t>(std::count_if(
        stairs.begin(), stairs.end(), [](const Stair& s) { return s.crossed_epoch.has_value(); }));
  }
};

inline double tightest(const BoundPoint& p) {
  return p.yesk ? std::min(p.yes0, *p.yesk) : p.yes0;
}

/// Derives the stair view from a raw monitoring series. The first stair is
/// YES-0 at the first monitored epoch.
inline StairSeries bound_cloud(const std::vector<BoundPoint>& raw) {
  StairSeries out;
  for (const BoundPoint& p : raw) {
    if (out.stairs.empty()) {
      out.stairs.push_back({p.yes0, p.epoch, std::nullopt, "YES-0"});
    } else if (p.train < out.stairs.back().value) {
      out.stairs.back().crossed_epoch = p.epoch;
      out.stairs.push_back({tightest(p), p.epoch, std::nullopt, p.yesk ? "YES-k" : "YES-0"});
    }
    out.active_value.push_back(out.stairs.back().value);
  }
  return out;
}

}  // namespace yesbound::fcnn
