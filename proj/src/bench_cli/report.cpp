#include "efh/bench_cli/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace efh::bench_cli {

using nlohmann::json;

double ModuleTimings::component_sum() const {
  double s = 0;
  for (const auto& c : components) s += c.mean_ms;
  return s;
}

TimingStats summarize(std::vector<double> samples) {
  TimingStats s;
  if (samples.empty()) return s;
  const double n = static_cast<double>(samples.size());
  double sum = 0;
  for (double v : samples) sum += v;
  s.mean_ms = sum / n;
  double sq = 0;
  for (double v : samples) sq += (v - s.mean_ms) * (v - s.mean_ms);
  s.stderr_ms = samples.size() > 1 ? std::sqrt(sq / (n - 1)) / std::sqrt(n) : 0.0;
  std::sort(samples.begin(), samples.end());
  auto rank = [&](double q) {
    const auto k = static_cast<std::size_t>(std::ceil(q * n));
    return samples[std::clamp<std::size_t>(k, 1, samples.size()) - 1];
  };
  s.p50_ms = rank(0.50);
  s.p95_ms = rank(0.95);
  return s;
}

ModuleTimings summarize(const std::vector<model::StageTimes>& runs, bool cache, std::size_t warmup) {
  ModuleTimings t;
  t.cache = cache;
  t.warmup = warmup;
  t.iterations = runs.size();
  std::array<std::vector<double>, 4> parts;
  std::vector<double> total;
  for (const auto& r : runs) {
    parts[0].push_back(r.text_backbone);
    parts[1].push_back(r.image_backbone);
    parts[2].push_back(r.encoder_fpn);
    parts[3].push_back(r.decoder_head);
    total.push_back(r.total);
  }
  for (std::size_t i = 0; i < 4; ++i) t.components[i] = summarize(parts[i]);
  t.total = summarize(total);
  return t;
}

namespace {

json stats_json(const TimingStats& s) {
  return {{"mean_ms", s.mean_ms}, {"p50_ms", s.p50_ms}, {"p95_ms", s.p95_ms}, {"stderr_ms", s.stderr_ms}};
}

TimingStats stats_from(const json& j) {
  TimingStats s;
  s.mean_ms = j.at("mean_ms").get<double>();
  s.p50_ms = j.at("p50_ms").get<double>();
  s.p95_ms = j.at("p95_ms").get<double>();
  s.stderr_ms = j.at("stderr_ms").get<double>();
  return s;
}

/// Shortest representation that reads back to the same double.
std::string number(double v) { return json(v).dump(); }

}  // namespace

std::string to_json(const ModuleTimings& t) {
  json j;
  json comps = json::object();
  for (std::size_t i = 0; i < 4; ++i) comps[kComponents[i]] = stats_json(t.components[i]);
  j["components"] = comps;
  j["total"] = stats_json(t.total);
  j["fps"] = t.fps();
  j["cache"] = t.cache;
  j["warmup"] = t.warmup;
  j["iterations"] = t.iterations;
  return j.dump(2);
}

ModuleTimings timings_from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    ModuleTimings t;
    const json& comps = j.at("components");
    if (comps.size() != 4) throw FormatError("timing report must have exactly four components");
    for (std::size_t i = 0; i < 4; ++i) t.components[i] = stats_from(comps.at(kComponents[i]));
    t.total = stats_from(j.at("total"));
    t.cache = j.at("cache").get<bool>();
    t.warmup = j.at("warmup").get<std::size_t>();
    t.iterations = j.at("iterations").get<std::size_t>();
    return t;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed timing report: ") + e.what());
  }
}

std::string to_csv(const ModuleTimings& t) {
  std::string out = "component,mean_ms,p50_ms,p95_ms\n";
  auto row = [&](const std::string& name, const TimingStats& s) {
    out += name + "," + number(s.mean_ms) + "," + number(s.p50_ms) + "," + number(s.p95_ms) + "\n";
  };
  for (std::size_t i = 0; i < 4; ++i) row(kComponents[i], t.components[i]);
  row("total", t.total);
  return out;
}

std::string render_table(const ModuleTimings& t) {
  auto cell = [](double ms) {
    if (ms < 1.0) return std::string("<1");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", ms);
    return std::string(buf);
  };
  std::string out = "Text Backbone | Image Backbone | Encoder/FPN | Decoder/Head | Total\n";
  out += cell(t.components[0].mean_ms);
  for (std::size_t i = 1; i < 4; ++i) out += " | " + cell(t.components[i].mean_ms);
  out += " | " + cell(t.total.mean_ms) + "\n";
  return out;
}

void emit_report(const ModuleTimings& t, const std::string& format,
                 const std::filesystem::path& path) {
  std::string body;
  if (format == "json") {
    body = to_json(t) + "\n";
  } else if (format == "csv") {
    body = to_csv(t);
  } else {
    throw FormatError("unknown report format '" + format + "' (json or csv)");
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write report to '" + path.string() + "'");
  os << body;
  if (!os.flush()) throw FormatError("cannot write report to '" + path.string() + "'");
}

}  // namespace efh::bench_cli
