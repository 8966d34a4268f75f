#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "efh/model/pipeline.hpp"

namespace efh::bench_cli {

/// Component names, in report order.
inline constexpr std::array<const char*, 4> kComponents = {"text_backbone", "image_backbone",
                                                           "encoder_fpn", "decoder_head"};

struct TimingStats {
  double mean_ms = 0;
  double p50_ms = 0;
  double p95_ms = 0;
  double stderr_ms = 0;  // standard error of the mean

  friend bool operator==(const TimingStats&, const TimingStats&) = default;
};

struct ModuleTimings {
  std::array<TimingStats, 4> components;  // in kComponents order
  TimingStats total;
  bool cache = false;
  std::size_t warmup = 0;
  std::size_t iterations = 0;

  double fps() const { return total.mean_ms > 0 ? 1000.0 / total.mean_ms : 0.0; }
  double component_sum() const;
  friend bool operator==(const ModuleTimings&, const ModuleTimings&) = default;
};

/// Mean, nearest-rank percentiles and standard error of `samples_ms`.
TimingStats summarize(std::vector<double> samples_ms);

ModuleTimings summarize(const std::vector<model::StageTimes>& runs, bool cache, std::size_t warmup);

std::string to_json(const ModuleTimings& t);
/// Throws FormatError on a malformed report.
ModuleTimings timings_from_json(const std::string& text);

/// Header `component,mean_ms,p50_ms,p95_ms`, then the four components
/// and `total`.
std::string to_csv(const ModuleTimings& t);

/// One-line table: component means with one decimal, "<1" below 1 ms.
std::string render_table(const ModuleTimings& t);

/// Writes json or csv. Throws FormatError on an unknown format or an
/// unwritable path.
void emit_report(const ModuleTimings& t, const std::string& format,
                 const std::filesystem::path& path);

}  // namespace efh::bench_cli
