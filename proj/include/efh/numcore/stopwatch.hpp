#pragma once

#include <chrono>

namespace efh {

/// Monotonic lap timer in milliseconds.
class Stopwatch {
 public:
  using Clock = std::chrono::steady_clock;

  Stopwatch() : start_(Clock::now()), last_(start_) {}

  /// Time since the previous lap (or construction), then starts a new lap.
  double lap() {
    const auto now = Clock::now();
    const double ms = std::chrono::duration<double, std::milli>(now - last_).count();
    last_ = now;
    return ms;
  }

  /// Time since construction.
  double total() const {
    return std::chrono::duration<double, std::milli>(Clock::now() - start_).count();
  }

 private:
  Clock::time_point start_;
  Clock::time_point last_;
};

}  // namespace efh
