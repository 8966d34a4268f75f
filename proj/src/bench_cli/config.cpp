#include "efh/bench_cli/config.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace efh::bench_cli {

using nlohmann::json;

namespace {

void fail(const std::string& field, const std::string& message) {
  throw ConfigError("config field '" + field + "': " + message);
}

void positive(const std::string& field, std::size_t v) {
  if (v == 0) fail(field, "must be >= 1");
}

}  // namespace

void ModelConfig::validate() const {
  positive("d", d);
  positive("d_text", d_text);
  positive("heads", heads);
  positive("layers", layers);
  positive("num_queries", num_queries);
  positive("points", points);
  positive("text_heads", text_heads);
  positive("text_layers", text_layers);
  positive("text_max_len", text_max_len);
  positive("batch", batch);
  positive("log_every", log_every);
  if (d % heads != 0) fail("heads", "d=" + std::to_string(d) + " is not divisible by heads");
  if (d_text % text_heads != 0) fail("text_heads", "d_text is not divisible by text_heads");
  if (frozen_text_layers > text_layers) fail("frozen_text_layers", "exceeds text_layers");
  if (text_max_len < 32) fail("text_max_len", "must be >= 32 to hold the fallback prompt");
  if (!(anchor_size > 0.0 && anchor_size < 1.0)) fail("anchor_size", "must be in (0,1)");
  if (!(score_threshold >= 0.0 && score_threshold <= 1.0)) fail("score_threshold", "must be in [0,1]");
  if (!(lr >= 0.0)) fail("lr", "must be >= 0");
  if (!(weight_decay >= 0.0)) fail("weight_decay", "must be >= 0");
  if (!(clip_norm >= 0.0)) fail("clip_norm", "must be >= 0");
  if (canvas == 0 || canvas % 32 != 0) fail("canvas", "must be a positive multiple of 32");
  for (auto [name, v] : {std::pair<const char*, double>{"weights.cls", weights.cls},
                         {"weights.l1", weights.l1}, {"weights.giou", weights.giou},
                         {"weights.dn_cls", weights.dn_cls}, {"weights.dn_l1", weights.dn_l1},
                         {"weights.dn_giou", weights.dn_giou}}) {
    if (!(v >= 0.0)) fail(name, "must be >= 0");
  }
  if (!(dn.box_noise >= 0.0 && dn.box_noise < 1.0)) fail("dn.box_noise", "must be in [0,1)");
  if (!(dn.label_flip >= 0.0 && dn.label_flip <= 1.0)) fail("dn.label_flip", "must be in [0,1]");
}

model::ArchConfig ModelConfig::arch() const {
  model::ArchConfig a;
  a.sync(d, d_text);
  a.text.heads = text_heads;
  a.text.layers = text_layers;
  a.text.max_len = text_max_len;
  a.text.frozen_layers = frozen_text_layers;
  a.encoder.heads = heads;
  a.encoder.anchor_size = anchor_size;
  a.decoder.heads = heads;
  a.decoder.points = points;
  a.decoder.layers = layers;
  a.decoder.num_queries = num_queries;
  a.decoder.score_threshold = score_threshold;
  return a;
}

training::TrainConfig ModelConfig::train_config(std::size_t steps, std::uint64_t run_seed) const {
  training::TrainConfig t;
  t.lr = lr;
  t.steps = steps;
  t.batch = batch;
  t.weight_decay = weight_decay;
  t.clip_norm = clip_norm;
  t.weights = weights;
  t.dn = dn;
  t.seed = run_seed;
  return t;
}

namespace {

template <typename V>
void read(const json& obj, const std::string& prefix, const char* key, V& out) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  const std::string field = prefix + key;
  if constexpr (std::is_same_v<V, double>) {
    if (!it->is_number()) fail(field, "expected a number");
    out = it->get<double>();
  } else {
    if (!it->is_number_unsigned()) fail(field, "expected a non-negative integer");
    out = it->get<V>();
  }
}

void reject_unknown(const json& obj, const std::string& prefix,
                    std::initializer_list<const char*> known) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) fail(prefix + it.key(), "unknown field");
  }
}

}  // namespace

ModelConfig parse_model_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  reject_unknown(j, "", {"d", "d_text", "heads", "layers", "num_queries", "points", "text_heads",
                         "text_layers", "frozen_text_layers", "text_max_len", "anchor_size",
                         "score_threshold", "seed", "weights", "dn", "lr", "batch", "weight_decay",
                         "clip_norm", "log_every", "canvas", "train_scenes", "eval_scenes"});
  ModelConfig c;
  read(j, "", "d", c.d);
  read(j, "", "d_text", c.d_text);
  read(j, "", "heads", c.heads);
  read(j, "", "layers", c.layers);
  read(j, "", "num_queries", c.num_queries);
  read(j, "", "points", c.points);
  read(j, "", "text_heads", c.text_heads);
  read(j, "", "text_layers", c.text_layers);
  read(j, "", "frozen_text_layers", c.frozen_text_layers);
  read(j, "", "text_max_len", c.text_max_len);
  read(j, "", "anchor_size", c.anchor_size);
  read(j, "", "score_threshold", c.score_threshold);
  read(j, "", "seed", c.seed);
  read(j, "", "lr", c.lr);
  read(j, "", "batch", c.batch);
  read(j, "", "weight_decay", c.weight_decay);
  read(j, "", "clip_norm", c.clip_norm);
  read(j, "", "log_every", c.log_every);
  read(j, "", "canvas", c.canvas);
  read(j, "", "train_scenes", c.train_scenes);
  read(j, "", "eval_scenes", c.eval_scenes);
  if (auto it = j.find("weights"); it != j.end()) {
    if (!it->is_object()) fail("weights", "expected an object");
    reject_unknown(*it, "weights.", {"cls", "l1", "giou", "dn_cls", "dn_l1", "dn_giou"});
    read(*it, "weights.", "cls", c.weights.cls);
    read(*it, "weights.", "l1", c.weights.l1);
    read(*it, "weights.", "giou", c.weights.giou);
    read(*it, "weights.", "dn_cls", c.weights.dn_cls);
    read(*it, "weights.", "dn_l1", c.weights.dn_l1);
    read(*it, "weights.", "dn_giou", c.weights.dn_giou);
  }
  if (auto it = j.find("dn"); it != j.end()) {
    if (!it->is_object()) fail("dn", "expected an object");
    reject_unknown(*it, "dn.", {"groups", "box_noise", "label_flip"});
    read(*it, "dn.", "groups", c.dn.groups);
    read(*it, "dn.", "box_noise", c.dn.box_noise);
    read(*it, "dn.", "label_flip", c.dn.label_flip);
  }
  c.validate();
  return c;
}

ModelConfig load_model_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_model_config(ss.str());
}

std::string to_json(const ModelConfig& c) {
  json j = json::object();
  j["d"] = c.d;
  j["d_text"] = c.d_text;
  j["heads"] = c.heads;
  j["layers"] = c.layers;
  j["num_queries"] = c.num_queries;
  j["points"] = c.points;
  j["text_heads"] = c.text_heads;
  j["text_layers"] = c.text_layers;
  j["frozen_text_layers"] = c.frozen_text_layers;
  j["text_max_len"] = c.text_max_len;
  j["anchor_size"] = c.anchor_size;
  j["score_threshold"] = c.score_threshold;
  j["seed"] = c.seed;
  j["weights"] = {{"cls", c.weights.cls},       {"l1", c.weights.l1},
                  {"giou", c.weights.giou},     {"dn_cls", c.weights.dn_cls},
                  {"dn_l1", c.weights.dn_l1},   {"dn_giou", c.weights.dn_giou}};
  j["dn"] = {{"groups", c.dn.groups}, {"box_noise", c.dn.box_noise}, {"label_flip", c.dn.label_flip}};
  j["lr"] = c.lr;
  j["batch"] = c.batch;
  j["weight_decay"] = c.weight_decay;
  j["clip_norm"] = c.clip_norm;
  j["log_every"] = c.log_every;
  j["canvas"] = c.canvas;
  j["train_scenes"] = c.train_scenes;
  j["eval_scenes"] = c.eval_scenes;
  return j.dump(2);
}

}  // namespace efh::bench_cli
