#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "detrtime/common.hpp"

namespace detrtime {

// Class ids: real classes are 0..K-1. K itself is reserved as the "no event"
// sentinel that unmatched queries are trained to predict; it never appears in
// ground-truth dense labels.
using ClassId = std::uint8_t;

inline constexpr ClassId no_event_class(int num_classes) {
  return static_cast<ClassId>(num_classes);
}

// A typed time interval in window-normalized coordinates.
struct Event {
  ClassId class_id = 0;
  double center = 0.0;  // fraction of the window, in [0,1]
  double length = 0.0;  // fraction of the window, in (0,1]
};

// Events over one window of window_len timesteps. When produced from a dense
// labeling the events are sorted by start, non-overlapping and tile the
// window exactly.
struct EventSet {
  std::vector<Event> events;
  std::int64_t window_len = 0;
};

// Per-timestep class sequence.
using DenseLabeling = std::vector<ClassId>;

// Boundary discretization rule shared by every rasterization site: timestep t
// belongs to an event iff t lies in [round(T*(c-l/2)), round(T*(c+l/2))),
// with round-half-up. Events produced by dense_to_events have exactly
// integral boundaries, so the round-trip is exact.
inline std::int64_t rasterize_boundary(double frac, std::int64_t window_len) {
  const double x = static_cast<double>(window_len) * frac;
  std::int64_t t = static_cast<std::int64_t>(std::floor(x + 0.5));
  return std::clamp<std::int64_t>(t, 0, window_len);
}

struct IndexInterval {
  std::int64_t begin = 0;  // inclusive
  std::int64_t end = 0;    // exclusive
};

inline IndexInterval rasterize_event(const Event& e, std::int64_t window_len) {
  return {rasterize_boundary(e.center - e.length / 2.0, window_len),
          rasterize_boundary(e.center + e.length / 2.0, window_len)};
}

// Maximal runs of equal labels become events; center and length are stored
// as fractions of the window.
inline EventSet dense_to_events(const DenseLabeling& labels) {
  if (labels.empty()) throw ShapeError("dense_to_events: empty labeling");
  const auto t_len = static_cast<std::int64_t>(labels.size());
  EventSet out;
  out.window_len = t_len;
  std::int64_t run_start = 0;
  for (std::int64_t t = 1; t <= t_len; ++t) {
    if (t == t_len || labels[static_cast<std::size_t>(t)] !=
                          labels[static_cast<std::size_t>(run_start)]) {
      Event e;
      e.class_id = labels[static_cast<std::size_t>(run_start)];
      e.center = static_cast<double>(run_start + t) / (2.0 * static_cast<double>(t_len));
      e.length = static_cast<double>(t - run_start) / static_cast<double>(t_len);
      out.events.push_back(e);
      run_start = t;
    }
  }
  return out;
}

// Rasterizes events back to a dense labeling. Timesteps covered by no event
// get `majority`. Overlap is an error here; overlap arbitration belongs to
// the decoder.
inline DenseLabeling events_to_dense(const EventSet& set, ClassId majority) {
  if (set.window_len <= 0) throw ShapeError("events_to_dense: window_len must be positive");
  DenseLabeling out(static_cast<std::size_t>(set.window_len), majority);
  std::vector<bool> covered(static_cast<std::size_t>(set.window_len), false);
  for (const Event& e : set.events) {
    const IndexInterval iv = rasterize_event(e, set.window_len);
    for (std::int64_t t = iv.begin; t < iv.end; ++t) {
      if (covered[static_cast<std::size_t>(t)]) {
        throw OverlapError("events_to_dense: two events cover timestep " + std::to_string(t));
      }
      covered[static_cast<std::size_t>(t)] = true;
      out[static_cast<std::size_t>(t)] = e.class_id;
    }
  }
  return out;
}

}  // namespace detrtime
