#include "stitchlab/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json_io.hpp"
#include "stitchlab/digest.hpp"
#include "stitchlab/errors.hpp"
#include "stitchlab/rng.hpp"

namespace stitchlab {

using detail::json;

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.anchors = {
      {"Ti", {{16, 4}}, 11},
      {"S", {{32, 8}}, 12},
      {"B", {{64, 8}}, 13},
  };
  c.selection.cascade_thresholds = {0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95};
  return c;
}

namespace {

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw ConfigError("config field '" + path + "': " + what);
}

template <typename T>
void read(const json& obj, const std::string& key, const std::string& path, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    fail(path + key, "has the wrong type");
  }
}

void check_keys(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) fail(path.empty() ? "<root>" : path, "must be an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : obj.items()) {
    if (!ok.count(key)) fail(path + key, "unknown field");
  }
}

BudgetSpec read_budget(const json& obj, const std::string& path, BudgetSpec budget) {
  check_keys(obj, path, {"epochs", "lr", "batch_size", "seed"});
  read(obj, "epochs", path, budget.epochs);
  read(obj, "lr", path, budget.lr);
  read(obj, "batch_size", path, budget.batch_size);
  read(obj, "seed", path, budget.seed);
  return budget;
}

json budget_json(const BudgetSpec& b) {
  return {{"epochs", b.epochs}, {"lr", b.lr}, {"batch_size", b.batch_size}, {"seed", b.seed}};
}

}  // namespace

void validate_config(const ExperimentConfig& c) {
  if (c.schema_version != 1) fail("schema_version", "only version 1 is supported");
  const auto& d = c.dataset;
  if (d.kind != "blobs" && d.kind != "spirals" && d.kind != "idx") fail("dataset.kind", "must be blobs, spirals or idx");
  if (d.kind != "idx") {
    if (d.num_classes < 2) fail("dataset.num_classes", "must be >= 2");
    if (d.per_class < 1) fail("dataset.per_class", "must be >= 1");
  }
  if (d.kind == "blobs" && d.input_dim < 1) fail("dataset.input_dim", "must be >= 1");
  if (d.kind == "blobs" && !(d.spread >= 0.0)) fail("dataset.spread", "must be >= 0");
  if (d.kind == "spirals" && !(d.noise >= 0.0)) fail("dataset.noise", "must be >= 0");
  if (d.kind == "idx" && (d.images.empty() || d.labels.empty())) fail("dataset.images", "idx datasets need images and labels paths");
  if (!(d.train_fraction > 0 && d.val_fraction > 0 && d.test_fraction > 0) ||
      std::abs(d.train_fraction + d.val_fraction + d.test_fraction - 1.0) > 1e-9) {
    fail("dataset.fractions", "must be positive and sum to 1");
  }
  if (c.anchors.size() < 2) fail("anchors", "at least two anchors are required");
  std::set<std::string> ids;
  for (std::size_t k = 0; k < c.anchors.size(); ++k) {
    const auto& a = c.anchors[k];
    const std::string path = "anchors[" + std::to_string(k) + "]";
    if (a.id.empty() || a.id.find_first_of(":/\\ ,") != std::string::npos) fail(path + ".id", "must be a non-empty plain name");
    if (!ids.insert(a.id).second) fail(path + ".id", "duplicate anchor id '" + a.id + "'");
    if (a.stages.empty()) fail(path + ".stages", "at least one stage is required");
    for (const auto& s : a.stages) {
      if (s.hidden_dim < 1 || s.num_blocks < 1) fail(path + ".stages", "hidden_dim and num_blocks must be >= 1");
    }
  }
  const std::pair<const char*, const BudgetSpec*> budgets[] = {
      {"training.anchor", &c.anchor_training}, {"training.probe", &c.probe_training}, {"training.stitch", &c.stitch_training}};
  for (const auto& [name, b] : budgets) {
    if (!(b->lr > 0.0)) fail(std::string(name) + ".lr", "must be > 0");
    if (b->batch_size < 1) fail(std::string(name) + ".batch_size", "must be >= 1");
  }
  if (c.init_samples < 1) fail("training.init_samples", "must be >= 1");
  if (!(c.selection.tau >= 0.0 && c.selection.tau <= 1.0)) fail("selection.tau", "must lie in [0, 1]");
  for (double t : c.selection.cascade_thresholds) {
    if (!(t > 0.0 && t <= 1.0)) fail("selection.cascade_thresholds", "thresholds must lie in (0, 1]");
  }
  for (double t : c.ablation_taus) {
    if (!(t >= 0.0 && t <= 1.0)) fail("ablation.taus", "values must lie in [0, 1]");
  }
  for (auto b : c.ablation_buckets) {
    if (b < 1) fail("ablation.buckets", "values must be >= 1");
  }
  if (c.seeds.empty()) fail("seeds", "at least one seed is required");
  if (c.threads < 1) fail("threads", "must be >= 1");
}

ExperimentConfig parse_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(doc, "", {"schema_version", "name", "dataset", "anchors", "training", "selection", "seeds", "ablation",
                       "output_dir", "threads"});
  ExperimentConfig c = default_config();
  read(doc, "schema_version", "", c.schema_version);
  read(doc, "name", "", c.name);
  read(doc, "seeds", "", c.seeds);
  read(doc, "output_dir", "", c.output_dir);
  read(doc, "threads", "", c.threads);

  if (doc.contains("dataset")) {
    const auto& d = doc["dataset"];
    check_keys(d, "dataset.", {"kind", "num_classes", "per_class", "input_dim", "spread", "noise", "images", "labels",
                               "seed", "fractions", "split_seed"});
    auto& s = c.dataset;
    read(d, "kind", "dataset.", s.kind);
    read(d, "num_classes", "dataset.", s.num_classes);
    read(d, "per_class", "dataset.", s.per_class);
    read(d, "input_dim", "dataset.", s.input_dim);
    read(d, "spread", "dataset.", s.spread);
    read(d, "noise", "dataset.", s.noise);
    read(d, "images", "dataset.", s.images);
    read(d, "labels", "dataset.", s.labels);
    read(d, "seed", "dataset.", s.seed);
    read(d, "split_seed", "dataset.", s.split_seed);
    if (d.contains("fractions")) {
      std::vector<double> f;
      read(d, "fractions", "dataset.", f);
      if (f.size() != 3) fail("dataset.fractions", "must have three entries (train, val, test)");
      s.train_fraction = f[0];
      s.val_fraction = f[1];
      s.test_fraction = f[2];
    }
  }
  if (doc.contains("anchors")) {
    const auto& arr = doc["anchors"];
    if (!arr.is_array()) fail("anchors", "must be an array");
    c.anchors.clear();
    for (std::size_t k = 0; k < arr.size(); ++k) {
      const std::string path = "anchors[" + std::to_string(k) + "].";
      const auto& a = arr[k];
      check_keys(a, path, {"id", "width", "depth", "stages", "seed"});
      AnchorSpec spec;
      read(a, "id", path, spec.id);
      read(a, "seed", path, spec.seed);
      if (a.contains("stages")) {
        if (!a["stages"].is_array()) fail(path + "stages", "must be an array");
        for (const auto& js : a["stages"]) {
          check_keys(js, path + "stages.", {"hidden_dim", "num_blocks"});
          StageSpec st;
          read(js, "hidden_dim", path + "stages.", st.hidden_dim);
          read(js, "num_blocks", path + "stages.", st.num_blocks);
          spec.stages.push_back(st);
        }
      } else {
        StageSpec st;
        read(a, "width", path, st.hidden_dim);
        read(a, "depth", path, st.num_blocks);
        spec.stages.push_back(st);
      }
      c.anchors.push_back(std::move(spec));
    }
  }
  if (doc.contains("training")) {
    const auto& t = doc["training"];
    check_keys(t, "training.", {"anchor", "probe", "stitch", "init_samples"});
    if (t.contains("anchor")) c.anchor_training = read_budget(t["anchor"], "training.anchor.", c.anchor_training);
    if (t.contains("probe")) c.probe_training = read_budget(t["probe"], "training.probe.", c.probe_training);
    if (t.contains("stitch")) c.stitch_training = read_budget(t["stitch"], "training.stitch.", c.stitch_training);
    read(t, "init_samples", "training.", c.init_samples);
  }
  if (doc.contains("selection")) {
    const auto& s = doc["selection"];
    check_keys(s, "selection.", {"method", "tau", "tau_mode", "num_buckets", "minkl_k", "snnet_mode", "cascade_thresholds"});
    std::string method = to_string(c.selection.method);
    read(s, "method", "selection.", method);
    if (method != "klas" && method != "snnet" && method != "minkl") fail("selection.method", "must be klas, snnet or minkl");
    c.selection.method = plan_method_from_string(method);
    read(s, "tau", "selection.", c.selection.tau);
    std::string mode = to_string(c.selection.tau_mode);
    read(s, "tau_mode", "selection.", mode);
    if (mode != "relative" && mode != "absolute") fail("selection.tau_mode", "must be relative or absolute");
    c.selection.tau_mode = mode == "relative" ? TauMode::kRelative : TauMode::kAbsolute;
    read(s, "num_buckets", "selection.", c.selection.num_buckets);
    read(s, "minkl_k", "selection.", c.selection.minkl_k);
    std::string snnet = to_string(c.selection.snnet_mode);
    read(s, "snnet_mode", "selection.", snnet);
    if (snnet != "paired" && snnet != "unpaired") fail("selection.snnet_mode", "must be paired or unpaired");
    c.selection.snnet_mode = snnet == "paired" ? SnnetMode::kPaired : SnnetMode::kUnpaired;
    read(s, "cascade_thresholds", "selection.", c.selection.cascade_thresholds);
  }
  if (doc.contains("ablation")) {
    const auto& a = doc["ablation"];
    check_keys(a, "ablation.", {"taus", "buckets"});
    read(a, "taus", "ablation.", c.ablation_taus);
    read(a, "buckets", "ablation.", c.ablation_buckets);
  }
  validate_config(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config(buffer.str());
}

std::string dump_config(const ExperimentConfig& c) {
  json anchors = json::array();
  for (const auto& a : c.anchors) {
    json stages = json::array();
    for (const auto& s : a.stages) stages.push_back({{"hidden_dim", s.hidden_dim}, {"num_blocks", s.num_blocks}});
    anchors.push_back({{"id", a.id}, {"stages", stages}, {"seed", a.seed}});
  }
  const auto& d = c.dataset;
  const json doc{
      {"schema_version", c.schema_version},
      {"name", c.name},
      {"dataset",
       {{"kind", d.kind},
        {"num_classes", d.num_classes},
        {"per_class", d.per_class},
        {"input_dim", d.input_dim},
        {"spread", d.spread},
        {"noise", d.noise},
        {"images", d.images},
        {"labels", d.labels},
        {"seed", d.seed},
        {"fractions", {d.train_fraction, d.val_fraction, d.test_fraction}},
        {"split_seed", d.split_seed}}},
      {"anchors", anchors},
      {"training",
       {{"anchor", budget_json(c.anchor_training)},
        {"probe", budget_json(c.probe_training)},
        {"stitch", budget_json(c.stitch_training)},
        {"init_samples", c.init_samples}}},
      {"selection",
       {{"method", to_string(c.selection.method)},
        {"tau", c.selection.tau},
        {"tau_mode", to_string(c.selection.tau_mode)},
        {"num_buckets", c.selection.num_buckets},
        {"minkl_k", c.selection.minkl_k},
        {"snnet_mode", to_string(c.selection.snnet_mode)},
        {"cascade_thresholds", c.selection.cascade_thresholds}}},
      {"seeds", c.seeds},
      {"ablation", {{"taus", c.ablation_taus}, {"buckets", c.ablation_buckets}}},
      {"output_dir", c.output_dir},
      {"threads", c.threads}};
  return doc.dump(2);
}

std::uint64_t config_digest(const ExperimentConfig& config) {
  ExperimentConfig copy = config;
  // Thread count and output location do not affect results.
  copy.threads = 1;
  copy.output_dir.clear();
  Fnv1a h;
  h.add_string(dump_config(copy));
  return h.value();
}

std::uint64_t run_seed_for(std::uint64_t component_seed, std::uint64_t run_seed) {
  return derive_seed(component_seed, run_seed);
}

Dataset make_dataset(const DatasetSpec& spec, std::uint64_t run_seed) {
  if (spec.kind == "blobs") {
    return gen_blobs(spec.num_classes, spec.per_class, spec.input_dim, spec.spread, run_seed_for(spec.seed, run_seed));
  }
  if (spec.kind == "spirals") {
    return gen_spirals(spec.num_classes, spec.per_class, spec.noise, run_seed_for(spec.seed, run_seed));
  }
  if (spec.kind == "idx") return load_idx(spec.images, spec.labels);
  throw ConfigError("config field 'dataset.kind': unsupported kind '" + spec.kind + "'");
}

Splits make_splits(const DatasetSpec& spec, std::uint64_t run_seed) {
  return split(make_dataset(spec, run_seed), spec.train_fraction, spec.val_fraction, spec.test_fraction,
               run_seed_for(spec.split_seed, run_seed));
}

}  // namespace stitchlab
