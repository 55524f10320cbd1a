#include "stitchlab/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <map>
#include <memory>
#include <set>
#include <sstream>

#include "json_io.hpp"
#include "stitchlab/digest.hpp"
#include "stitchlab/errors.hpp"
#include "stitchlab/evaluation.hpp"
#include "stitchlab/experiment.hpp"
#include "stitchlab/rng.hpp"
#include "stitchlab/similarity.hpp"
#include "stitchlab/study.hpp"

namespace stitchlab {

namespace fs = std::filesystem;
using detail::json;

ExperimentConfig apply_overrides(ExperimentConfig config, const RunOverrides& o) {
  if (o.seed) config.seeds = {*o.seed};
  if (o.out) config.output_dir = o.out->string();
  if (o.method) {
    if (*o.method == PlanMethod::kExhaustive) throw ConfigError("config field 'selection.method': must be klas, snnet or minkl");
    config.selection.method = *o.method;
  }
  if (o.tau) config.selection.tau = *o.tau;
  if (o.buckets) {
    if (*o.buckets < 1) throw ConfigError("config field 'selection.num_buckets': --buckets must be >= 1");
    config.selection.num_buckets = *o.buckets;
  }
  if (o.threads) config.threads = *o.threads;
  validate_config(config);
  return config;
}

std::uint64_t run_digest(const ExperimentConfig& config, std::uint64_t run_seed) {
  ExperimentConfig upstream = config;
  upstream.selection = SelectionSpec{};
  upstream.ablation_taus.clear();
  upstream.ablation_buckets.clear();
  upstream.seeds = {run_seed};
  upstream.name.clear();
  return config_digest(upstream);
}

std::uint64_t file_digest(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot read artifact " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Fnv1a h;
  h.add_string(bytes);
  return h.value();
}

int exit_code_for(const std::exception& error) {
  if (dynamic_cast<const ConfigError*>(&error)) return 2;
  if (dynamic_cast<const MissingArtifact*>(&error)) return 3;
  if (dynamic_cast<const NumericError*>(&error)) return 4;
  return 1;
}

namespace {

std::string pair_name(const std::string& source, const std::string& target) { return source + "__" + target; }

void require_file(const fs::path& path, const std::string& stage) {
  if (!fs::exists(path)) {
    throw MissingArtifact("missing artifact " + path.string() + "; run `stitchlab " + stage + "` first");
  }
}

std::string digest_files(const std::vector<fs::path>& paths) {
  Fnv1a h;
  for (const auto& p : paths) {
    h.add_string(p.filename().string());
    h.add_u64(file_digest(p));
  }
  return to_hex(h.value());
}

void check_digest(const std::string& recorded, const std::string& expected, const fs::path& artifact,
                  const std::string& stage) {
  if (recorded != expected) {
    throw StaleArtifact("stale artifact " + artifact.string() + ": its inputs changed since it was written; rerun `stitchlab " +
                        stage + "`");
  }
}

std::ofstream open_csv(const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

json dataset_to_json(const Dataset& d) {
  return {{"inputs", detail::tensor_to_json(d.inputs)},
          {"labels", d.labels},
          {"num_classes", d.num_classes},
          {"source_indices", d.source_indices},
          {"digest", to_hex(digest(d))}};
}

Dataset dataset_from_json(const json& j, SplitTag tag, const fs::path& path) {
  Dataset d;
  try {
    d.inputs = detail::tensor_from_json(detail::field(j, "inputs"), "inputs");
    d.labels = detail::field(j, "labels").get<std::vector<std::size_t>>();
    d.num_classes = detail::field(j, "num_classes").get<std::size_t>();
    d.source_indices = detail::field(j, "source_indices").get<std::vector<std::size_t>>();
    d.split = tag;
    d.validate();
    if (to_hex(digest(d)) != detail::field(j, "digest").get<std::string>()) {
      throw FormatError(path.string() + ": " + to_string(tag) + " split does not match its digest");
    }
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return d;
}

void write_evaluations(const fs::path& path, std::vector<StitchEvaluation> evals) {
  std::sort(evals.begin(), evals.end(), [](const auto& a, const auto& b) { return config_less(a.config, b.config); });
  fs::create_directories(path.parent_path());
  write_evaluation_csv(evals, path);
}

/// Reads `config,i,j,flops,accuracy` rows back, keyed by config id.
std::vector<ParetoPoint> read_evaluation_points(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  std::vector<ParetoPoint> points;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() < 5) throw FormatError(path.string() + ": malformed row '" + line + "'");
    points.push_back({cells[0], std::stod(cells[3]), std::stod(cells[4])});
  }
  return points;
}

struct Selection {
  StitchPlan plan;
  std::string inputs_digest;
  std::vector<ScoredConfig> scored;  // KLAS pair, empty for snnet
};

class Context {
 public:
  explicit Context(const Pipeline& p) : p_(p) {}

  fs::path path(const std::string& rel) const { return p_.dir() / rel; }
  fs::path dataset_path() const { return path("data/dataset.json"); }
  fs::path anchor_path(const std::string& id) const { return path("anchors/" + id + ".json"); }
  fs::path probe_path(const std::string& id) const { return path("probes/" + id + ".json"); }
  fs::path similarity_path(const std::string& s, const std::string& t) const {
    return path("similarity/" + pair_name(s, t) + ".json");
  }
  fs::path plan_path(PlanMethod m) const { return path("plans/" + to_string(m) + ".json"); }
  fs::path stitch_path(PlanMethod m, const std::string& s, const std::string& t, const std::string& kind) const {
    return path("stitches/" + to_string(m) + "/" + pair_name(s, t) + "." + kind + ".json");
  }

  const Splits& splits() {
    if (!splits_) {
      require_file(dataset_path(), "gen-data");
      const auto doc = detail::read_json_file(dataset_path());
      detail::require_format(doc, "stitchlab.dataset", 1, dataset_path());
      check_digest(detail::field(doc, "inputs_digest").get<std::string>(), to_hex(run_digest(p_.config(), p_.run_seed())),
                   dataset_path(), "gen-data");
      const auto& s = detail::field(doc, "splits");
      splits_ = Splits{dataset_from_json(detail::field(s, "train"), SplitTag::kTrain, dataset_path()),
                       dataset_from_json(detail::field(s, "val"), SplitTag::kVal, dataset_path()),
                       dataset_from_json(detail::field(s, "test"), SplitTag::kTest, dataset_path())};
    }
    return *splits_;
  }

  /// Anchors in configuration order.
  const std::vector<std::shared_ptr<const AnchorModel>>& anchors() {
    if (anchors_.empty()) {
      const auto train_digest = digest(splits().train);
      for (const auto& spec : p_.config().anchors) {
        const auto file = anchor_path(spec.id);
        require_file(file, "train-anchors");
        auto a = std::make_shared<AnchorModel>(load_anchor(file));
        if (a->dataset_digest() != train_digest) {
          throw StaleArtifact("stale artifact " + file.string() + ": trained on a different dataset; rerun `stitchlab train-anchors`");
        }
        if (a->stages() != spec.stages) {
          throw StaleArtifact("stale artifact " + file.string() + ": architecture differs from the config; rerun `stitchlab train-anchors`");
        }
        a->freeze();
        anchors_.push_back(std::move(a));
      }
    }
    return anchors_;
  }

  std::shared_ptr<const AnchorModel> anchor(const std::string& id) {
    for (const auto& a : anchors())
      if (a->id() == id) return a;
    throw ConfigError("config field 'anchors': unknown anchor '" + id + "'");
  }

  std::vector<fs::path> anchor_files() const {
    std::vector<fs::path> out;
    for (const auto& spec : p_.config().anchors) out.push_back(anchor_path(spec.id));
    return out;
  }

  const ProbeSet& probes(const AnchorModel& a) {
    auto it = probes_.find(a.id());
    if (it == probes_.end()) {
      const auto file = probe_path(a.id());
      require_file(file, "train-probes");
      ProbeSet set = load_probeset(file);
      if (set.anchor_digest != a.weight_digest()) {
        throw StaleArtifact("stale artifact " + file.string() + ": probes belong to other anchor weights; rerun `stitchlab train-probes`");
      }
      it = probes_.emplace(a.id(), std::move(set)).first;
    }
    return it->second;
  }

  /// Small→large anchor pairs in FLOPs order.
  std::vector<std::pair<std::shared_ptr<const AnchorModel>, std::shared_ptr<const AnchorModel>>> pairs() {
    std::vector<const AnchorModel*> raw;
    for (const auto& a : anchors()) raw.push_back(a.get());
    const auto ordered = order_by_flops(raw);
    std::vector<std::pair<std::shared_ptr<const AnchorModel>, std::shared_ptr<const AnchorModel>>> out;
    for (std::size_t a = 0; a < ordered.size(); ++a) {
      for (std::size_t b = a + 1; b < ordered.size(); ++b) {
        if (flops(*ordered[a]) < flops(*ordered[b])) out.emplace_back(anchor(ordered[a]->id()), anchor(ordered[b]->id()));
      }
    }
    if (out.empty()) throw ConfigError("config field 'anchors': no anchor pair with strictly increasing FLOPs");
    return out;
  }

  std::vector<const AnchorModel*> chain() {
    std::vector<const AnchorModel*> raw;
    for (const auto& a : anchors()) raw.push_back(a.get());
    return order_by_flops(raw);
  }

  const SimilarityBundle& similarity(const AnchorModel& s, const AnchorModel& t) {
    const auto key = pair_name(s.id(), t.id());
    auto it = similarity_.find(key);
    if (it == similarity_.end()) {
      const auto file = similarity_path(s.id(), t.id());
      require_file(file, "similarity");
      SimilarityBundle b = load_similarity(file);
      for (const auto& m : b.matrices) {
        if (m.source_digest != s.weight_digest() || m.target_digest != t.weight_digest()) {
          throw StaleArtifact("stale artifact " + file.string() + ": computed for other anchor weights; rerun `stitchlab similarity`");
        }
      }
      it = similarity_.emplace(key, std::move(b)).first;
    }
    return it->second;
  }

  std::vector<fs::path> similarity_files() {
    std::vector<fs::path> out;
    for (const auto& [s, t] : pairs()) out.push_back(similarity_path(s->id(), t->id()));
    return out;
  }

  /// The pair with the lowest last-block KL (first in FLOPs order on ties).
  std::pair<std::shared_ptr<const AnchorModel>, std::shared_ptr<const AnchorModel>> klas_pair() {
    std::pair<std::shared_ptr<const AnchorModel>, std::shared_ptr<const AnchorModel>> best;
    double best_kl = std::numeric_limits<double>::infinity();
    for (const auto& [s, t] : pairs()) {
      const double kl = similarity(*s, *t).last_block_kl;
      if (kl < best_kl) {
        best_kl = kl;
        best = {s, t};
      }
    }
    return best;
  }

  std::vector<ScoredConfig> scored(const AnchorModel& s, const AnchorModel& t) {
    const auto& b = similarity(s, t);
    return score_configs(enumerate_configs(s, t), b.matrices, b.sigma);
  }

  std::string selection_inputs_digest() {
    auto files = anchor_files();
    const auto sims = similarity_files();
    files.insert(files.end(), sims.begin(), sims.end());
    return digest_files(files);
  }

  Selection select(PlanMethod method, const SelectionSpec& spec) {
    Selection out;
    out.inputs_digest = selection_inputs_digest();
    KlasOptions opts;
    opts.tau = spec.tau;
    opts.tau_mode = spec.tau_mode;
    opts.num_buckets = spec.num_buckets;
    opts.threads = p_.config().threads;
    if (method == PlanMethod::kSnnet) {
      const auto c = chain();
      out.plan = snnet_baseline(c, spec.snnet_mode);
      return out;
    }
    const auto [s, t] = klas_pair();
    out.scored = scored(*s, *t);
    StitchPlan klas_plan = klas_select(out.scored, opts, t->depth());
    klas_plan.method = PlanMethod::kKlas;
    if (method == PlanMethod::kKlas) {
      out.plan = std::move(klas_plan);
    } else if (method == PlanMethod::kMinKl) {
      out.plan = minkl_baseline(out.scored, spec.minkl_k == 0 ? klas_plan.size() : spec.minkl_k);
    } else {
      throw ConfigError("config field 'selection.method': unsupported method " + to_string(method));
    }
    return out;
  }

  /// Loads a plan after checking it still matches the current anchors and similarity.
  StitchPlan plan(PlanMethod method) {
    const auto file = plan_path(method);
    require_file(file, "select --method " + to_string(method));
    std::string recorded;
    StitchPlan plan = load_plan(file, &recorded);
    check_digest(recorded, selection_inputs_digest(), file, "select --method " + to_string(method));
    return plan;
  }

  struct Group {
    std::shared_ptr<const AnchorModel> source;
    std::shared_ptr<const AnchorModel> target;
    StitchPlan plan;
  };

  std::vector<Group> groups(const StitchPlan& plan) {
    std::map<std::pair<std::string, std::string>, StitchPlan> by_pair;
    for (const auto& e : plan.entries) {
      auto& sub = by_pair[{e.config.source_id, e.config.target_id}];
      sub.method = plan.method;
      sub.entries.push_back(e);
    }
    std::vector<Group> out;
    for (auto& [key, sub] : by_pair) out.push_back({anchor(key.first), anchor(key.second), std::move(sub)});
    return out;
  }

  /// Rebuilds a supernet and loads the requested stitch stage after checking provenance.
  std::unique_ptr<StitchedSupernet> load_group(PlanMethod method, const Group& g, const std::string& kind,
                                               const std::string& expected_digest, const std::string& stage) {
    const auto file = stitch_path(method, g.source->id(), g.target->id(), kind);
    require_file(file, stage + " --method " + to_string(method));
    auto net = std::make_unique<StitchedSupernet>(g.source, g.target, g.plan);
    std::string recorded;
    try {
      load_stitch_layers(*net, file, &recorded);
    } catch (const FormatError& e) {
      throw StaleArtifact(std::string(e.what()) + "; rerun `stitchlab " + stage + "`");
    }
    check_digest(recorded, expected_digest, file, stage + " --method " + to_string(method));
    return net;
  }

  /// Evaluation sidecar digest: finalized stitch files plus the dataset.
  std::string evaluation_inputs_digest(PlanMethod method, const std::vector<Group>& groups) const {
    std::vector<fs::path> files{dataset_path()};
    for (const auto& g : groups) files.push_back(stitch_path(method, g.source->id(), g.target->id(), "final"));
    return digest_files(files);
  }

  std::string cascade_inputs_digest() {
    const auto c = chain();
    return digest_files({dataset_path(), anchor_path(c.front()->id()), anchor_path(c.back()->id())});
  }

  std::string oracle_inputs_digest() {
    const auto [s, t] = klas_pair();
    return digest_files(
        {dataset_path(), anchor_path(s->id()), anchor_path(t->id()), similarity_path(s->id(), t->id()),
         probe_path(s->id()), probe_path(t->id())});
  }

 private:
  const Pipeline& p_;
  std::optional<Splits> splits_;
  std::vector<std::shared_ptr<const AnchorModel>> anchors_;
  std::map<std::string, ProbeSet> probes_;
  std::map<std::string, SimilarityBundle> similarity_;
};

void write_sidecar(const fs::path& path, const std::string& format, const std::string& inputs_digest,
                   const fs::path& data_file) {
  detail::write_json_file({{"format", format},
                           {"version", 1},
                           {"inputs_digest", inputs_digest},
                           {"data_file", data_file.filename().string()},
                           {"data_digest", to_hex(file_digest(data_file))}},
                          path);
}

/// Checks a sidecar against freshly computed inputs and the data file it describes.
void verify_sidecar(const fs::path& path, const std::string& expected_inputs, const std::string& stage) {
  require_file(path, stage);
  const auto doc = detail::read_json_file(path);
  check_digest(detail::field(doc, "inputs_digest").get<std::string>(), expected_inputs, path, stage);
  const auto data = path.parent_path() / detail::field(doc, "data_file").get<std::string>();
  require_file(data, stage);
  check_digest(detail::field(doc, "data_digest").get<std::string>(), to_hex(file_digest(data)), data, stage);
}

std::string tau_label(double tau) {
  std::ostringstream out;
  out << tau;
  return out.str();
}

}  // namespace

Pipeline::Pipeline(ExperimentConfig config) : config_(std::move(config)) {
  validate_config(config_);
  run_seed_ = config_.seeds.front();
  dir_ = fs::path(config_.output_dir) / ("run-" + to_hex(run_digest(config_, run_seed_)));
}

const std::vector<std::string>& Pipeline::stage_names() {
  static const std::vector<std::string> names{"gen-data", "train-anchors", "train-probes", "similarity",
                                              "select",   "init-stitches", "finetune",     "evaluate",
                                              "oracle",   "report",        "ablate-tau",   "ablate-buckets",
                                              "study",    "all"};
  return names;
}

void Pipeline::run(const std::string& stage) {
  const PlanMethod m = config_.selection.method;
  if (stage == "gen-data") return gen_data();
  if (stage == "train-anchors") return train_anchors();
  if (stage == "train-probes") return train_probes();
  if (stage == "similarity") return similarity();
  if (stage == "select") return select(m);
  if (stage == "init-stitches") return init_stitches(m);
  if (stage == "finetune") return finetune(m);
  if (stage == "evaluate") return evaluate(m);
  if (stage == "oracle") return oracle();
  if (stage == "report") return report();
  if (stage == "ablate-tau") return ablate_tau();
  if (stage == "ablate-buckets") return ablate_buckets();
  if (stage == "study") return study();
  if (stage == "all") return run_all();
  throw ConfigError("unknown subcommand '" + stage + "'");
}

void Pipeline::run_all() {
  gen_data();
  train_anchors();
  train_probes();
  similarity();
  for (PlanMethod m : {PlanMethod::kKlas, PlanMethod::kSnnet, PlanMethod::kMinKl}) {
    select(m);
    init_stitches(m);
    finetune(m);
    evaluate(m);
  }
  oracle();
  ablate_tau();
  ablate_buckets();
  report();
}

void Pipeline::gen_data() {
  const Splits s = make_splits(config_.dataset, run_seed_);
  fs::create_directories(dir_);
  {
    std::ofstream out(dir_ / "config.json");
    out << dump_config(config_) << '\n';
  }
  detail::write_json_file({{"format", "stitchlab.dataset"},
                           {"version", 1},
                           {"run_seed", run_seed_},
                           {"inputs_digest", to_hex(run_digest(config_, run_seed_))},
                           {"splits",
                            {{"train", dataset_to_json(s.train)},
                             {"val", dataset_to_json(s.val)},
                             {"test", dataset_to_json(s.test)}}}},
                          Context(*this).dataset_path());
}

void Pipeline::train_anchors() {
  Context ctx(*this);
  const auto& splits = ctx.splits();
  for (const auto& spec : config_.anchors) {
    TrainResult trace;
    const AnchorModel a = build_anchor(config_, spec, splits.train, run_seed_, &trace);
    save_anchor(a, ctx.anchor_path(spec.id));
    auto out = open_csv(ctx.path("anchors/" + spec.id + "_loss.csv"));
    out << "epoch,loss\n";
    for (std::size_t e = 0; e < trace.loss_trace.size(); ++e) out << e << ',' << format_double(trace.loss_trace[e]) << '\n';
  }
}

void Pipeline::train_probes() {
  Context ctx(*this);
  const auto& splits = ctx.splits();
  for (const auto& a : ctx.anchors()) {
    const ProbeSet set = build_probeset(config_, *a, splits.train, &splits.val, run_seed_, true);
    save_probeset(set, ctx.probe_path(a->id()));
    export_accuracy_trace_csv(set, ctx.path("probes/" + a->id() + "_trace.csv"));
  }
}

void Pipeline::similarity() {
  Context ctx(*this);
  const auto& val = ctx.splits().val;
  auto table = open_csv(ctx.path("similarity/anchor_pairs.csv"));
  table << "source,target,last_block_kl\n";
  for (const auto& [s, t] : ctx.pairs()) {
    const auto matrices = similarity_matrices(*s, ctx.probes(*s), *t, ctx.probes(*t), val, config_.threads);
    const auto sigma = intra_capacity(*t, ctx.probes(*t), val);
    const double lbkl = last_block_kl(*s, *t, val);
    save_similarity(matrices, sigma, lbkl, ctx.similarity_path(s->id(), t->id()));
    for (const auto& m : matrices) {
      export_heatmap(m, ctx.path("similarity/" + pair_name(s->id(), t->id()) + "_stage" + std::to_string(m.stage) + ".csv"));
    }
    table << s->id() << ',' << t->id() << ',' << format_double(lbkl) << '\n';
  }
}

void Pipeline::select(PlanMethod method) {
  Context ctx(*this);
  const Selection sel = ctx.select(method, config_.selection);
  save_plan(sel.plan, ctx.plan_path(method), sel.inputs_digest);
  if (method == PlanMethod::kKlas) {
    auto out = open_csv(ctx.path("plans/klas_scores.csv"));
    out << "config,i,j,flops,gamma,omega,sigma,selected\n";
    for (const auto& s : sel.scored) {
      out << s.config.key() << ',' << s.config.source_block << ',' << s.config.target_block << ',' << s.config.flops << ','
          << format_double(s.score.gamma) << ',' << format_double(s.score.omega) << ',' << format_double(s.score.sigma)
          << ',' << (sel.plan.contains(s.config) ? 1 : 0) << '\n';
    }
  }
}

void Pipeline::init_stitches(PlanMethod method) {
  Context ctx(*this);
  const StitchPlan plan = ctx.plan(method);
  const std::string plan_digest = to_hex(file_digest(ctx.plan_path(method)));
  const Tensor batch = init_batch(ctx.splits().val, config_.init_samples);
  for (const auto& g : ctx.groups(plan)) {
    StitchedSupernet net(g.source, g.target, g.plan);
    net.initialize(batch);
    save_stitch_layers(net, ctx.stitch_path(method, g.source->id(), g.target->id(), "init"), plan_digest);
  }
}

void Pipeline::finetune(PlanMethod method) {
  Context ctx(*this);
  const StitchPlan plan = ctx.plan(method);
  const std::string plan_digest = to_hex(file_digest(ctx.plan_path(method)));
  for (const auto& g : ctx.groups(plan)) {
    auto net = ctx.load_group(method, g, "init", plan_digest, "init-stitches");
    FinetuneOptions opts = finetune_options(config_, run_seed_);
    Fnv1a h;
    h.add_string(pair_name(g.source->id(), g.target->id()));
    opts.seed = derive_seed(opts.seed, h.value());
    const FinetuneResult result = finetune_supernet(*net, ctx.splits().train, opts);
    const auto init_file = ctx.stitch_path(method, g.source->id(), g.target->id(), "init");
    save_stitch_layers(*net, ctx.stitch_path(method, g.source->id(), g.target->id(), "final"),
                       to_hex(file_digest(init_file)));
    auto out = open_csv(ctx.path("stitches/" + to_string(method) + "/" + pair_name(g.source->id(), g.target->id()) +
                                 "_trace.csv"));
    out << "config,epoch,loss\n";
    for (std::size_t k = 0; k < result.traces.size(); ++k) {
      const auto& tr = result.traces[k];
      for (std::size_t s = 0; s < tr.losses.size(); ++s) {
        out << net->layers()[k].config.key() << ',' << tr.epochs[s] << ',' << format_double(tr.losses[s]) << '\n';
      }
    }
  }
}

void Pipeline::evaluate(PlanMethod method) {
  Context ctx(*this);
  const StitchPlan plan = ctx.plan(method);
  const auto groups = ctx.groups(plan);
  std::vector<StitchEvaluation> evals;
  for (const auto& g : groups) {
    const auto init_file = ctx.stitch_path(method, g.source->id(), g.target->id(), "init");
    const auto net = ctx.load_group(method, g, "final", to_hex(file_digest(init_file)), "finetune");
    const auto part = evaluate_stitched(*net, ctx.splits().test, config_.threads);
    evals.insert(evals.end(), part.begin(), part.end());
  }
  const auto csv = ctx.path("results/eval_" + to_string(method) + ".csv");
  write_evaluations(csv, evals);
  write_sidecar(ctx.path("results/eval_" + to_string(method) + ".json"), "stitchlab.evaluation",
                ctx.evaluation_inputs_digest(method, groups), csv);

  const auto& test = ctx.splits().test;
  {
    auto out = open_csv(ctx.path("results/anchors.csv"));
    out << "anchor,flops,accuracy\n";
    for (const auto* a : ctx.chain()) {
      out << a->id() << ',' << flops(*a) << ',' << format_double(accuracy(a->forward(test.inputs), test.labels)) << '\n';
    }
  }
  const auto chain = ctx.chain();
  const auto points = cascade_operating_points(*chain.front(), *chain.back(), config_.selection.cascade_thresholds, test);
  const auto cascade_csv = ctx.path("results/cascade.csv");
  {
    auto out = open_csv(cascade_csv);
    out << "threshold,avg_flops,accuracy,routed_fraction\n";
    for (const auto& p : points) {
      out << format_double(p.threshold) << ',' << format_double(p.avg_flops) << ',' << format_double(p.accuracy) << ','
          << format_double(p.routed_fraction) << '\n';
    }
  }
  write_sidecar(ctx.path("results/cascade.json"), "stitchlab.cascade", ctx.cascade_inputs_digest(), cascade_csv);
}

void Pipeline::oracle() {
  Context ctx(*this);
  const auto [s, t] = ctx.klas_pair();
  const auto& splits = ctx.splits();
  const auto evals = exhaustive_oracle(config_, s, t, splits, run_seed_, config_.threads);
  const auto scored = ctx.scored(*s, *t);
  const double target_acc = accuracy(t->forward(splits.test.inputs), splits.test.labels);

  std::map<std::string, const StitchEvaluation*> by_key;
  for (const auto& e : evals) by_key[e.config.key()] = &e;

  // Baseline similarity metrics on the validation split.
  const auto& val = splits.val;
  const auto fa = s->extract_block_features(val.inputs);
  const auto ga = t->extract_block_features(val.inputs);
  const auto& sp = ctx.probes(*s);
  Dataset shuffled = shuffle_labels(splits.train, derive_seed(run_seed_, 0x5348));
  const ProbeSet shuffled_s = build_probeset(config_, *s, shuffled, nullptr, derive_seed(run_seed_, 1), false);
  const ProbeSet shuffled_t = build_probeset(config_, *t, shuffled, nullptr, derive_seed(run_seed_, 2), false);
  const auto shuffled_scored = score_configs(enumerate_configs(*s, *t),
                                             similarity_matrices(*s, shuffled_s, *t, shuffled_t, val, config_.threads),
                                             intra_capacity(*t, shuffled_t, val));
  const auto nan = std::numeric_limits<double>::quiet_NaN();
  const auto guarded = [&](auto fn) {
    try {
      return fn();
    } catch (const NumericError&) {
      return nan;
    } catch (const InvalidInput&) {
      return nan;
    }
  };

  auto out = open_csv(ctx.path("oracle/exhaustive.csv"));
  out << "config,i,j,flops,accuracy,delta_accuracy,gamma,omega,sigma\n";
  auto metrics = open_csv(ctx.path("oracle/metrics.csv"));
  metrics << "config,delta_accuracy,gamma,omega,mse,ce,dm,cka_distance,cc_cka_distance,shuffled_gamma\n";
  for (std::size_t k = 0; k < scored.size(); ++k) {
    const auto& c = scored[k].config;
    const auto& e = *by_key.at(c.key());
    const double delta = target_acc - e.accuracy;
    out << c.key() << ',' << c.source_block << ',' << c.target_block << ',' << c.flops << ',' << format_double(e.accuracy)
        << ',' << format_double(delta) << ',' << format_double(scored[k].score.gamma) << ','
        << format_double(scored[k].score.omega) << ',' << format_double(scored[k].score.sigma) << '\n';
    const Tensor& f = fa[c.source_block - 1];
    const Tensor& g = ga[c.target_block - 1];
    const double mse = f.cols() == g.cols() ? guarded([&] { return mse_metric(f, g); }) : nan;
    const double ce = ce_metric(sp.probe(c.source_block).distributions(f), val.labels);
    const double dm = guarded([&] { return dm_metric(f, g); });
    const double ck = guarded([&] { return 1.0 - cka(f, g); });
    const double cc = guarded([&] { return 1.0 - class_conditional_cka(f, g, val.labels); });
    metrics << c.key() << ',' << format_double(delta) << ',' << format_double(scored[k].score.gamma) << ','
            << format_double(scored[k].score.omega) << ',' << format_double(mse) << ',' << format_double(ce) << ','
            << format_double(dm) << ',' << format_double(ck) << ',' << format_double(cc) << ','
            << format_double(shuffled_scored[k].score.gamma) << '\n';
  }
  out.close();
  metrics.close();
  write_sidecar(ctx.path("oracle/exhaustive.json"), "stitchlab.oracle", ctx.oracle_inputs_digest(),
                ctx.path("oracle/exhaustive.csv"));
  write_sidecar(ctx.path("oracle/metrics.json"), "stitchlab.oracle_metrics", ctx.oracle_inputs_digest(),
                ctx.path("oracle/metrics.csv"));
}

namespace {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw FormatError("missing column " + name);
    return static_cast<std::size_t>(it - header.begin());
  }
};

CsvTable read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("cannot read " + path.string());
  CsvTable t;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (first) {
      t.header = cells;
      first = false;
    } else {
      t.rows.push_back(cells);
    }
  }
  return t;
}

double cell_double(const std::string& s) {
  if (s == "nan" || s == "-nan") return std::numeric_limits<double>::quiet_NaN();
  return std::stod(s);
}

/// AUC of each plan's points under oracle accuracies, normalised over all plans.
std::vector<double> plan_aucs(const std::vector<std::vector<ParetoPoint>>& curves) {
  std::vector<std::vector<ParetoPoint>> usable;
  for (const auto& c : curves)
    if (!c.empty()) usable.push_back(c);
  const auto [lo, hi] = common_flops_bounds(usable);
  std::vector<double> out;
  for (const auto& c : curves) {
    out.push_back(c.size() >= 2 ? auc(c, lo, hi) : std::numeric_limits<double>::quiet_NaN());
  }
  return out;
}

std::vector<StitchEvaluation> read_oracle(const fs::path& path) {
  const CsvTable t = read_csv(path);
  std::vector<StitchEvaluation> out;
  const auto ci = t.column("config"), cf = t.column("flops"), ca = t.column("accuracy");
  for (const auto& r : t.rows) {
    StitchEvaluation e;
    const auto arrow = r[ci].find("->");
    const auto colon1 = r[ci].find(':');
    const auto colon2 = r[ci].find(':', arrow);
    e.config.source_id = r[ci].substr(0, colon1);
    e.config.source_block = std::stoul(r[ci].substr(colon1 + 1, arrow - colon1 - 1));
    e.config.target_id = r[ci].substr(arrow + 2, colon2 - arrow - 2);
    e.config.target_block = std::stoul(r[ci].substr(colon2 + 1));
    e.config.flops = std::stoull(r[cf]);
    e.flops = e.config.flops;
    e.accuracy = cell_double(r[ca]);
    out.push_back(e);
  }
  return out;
}

}  // namespace

void Pipeline::ablate_tau() {
  Context ctx(*this);
  const auto oracle_csv = ctx.path("oracle/exhaustive.csv");
  verify_sidecar(ctx.path("oracle/exhaustive.json"), ctx.oracle_inputs_digest(), "oracle");
  const auto evals = read_oracle(oracle_csv);
  std::vector<std::vector<ParetoPoint>> curves;
  std::vector<std::size_t> sizes;
  for (double tau : config_.ablation_taus) {
    SelectionSpec spec = config_.selection;
    spec.tau = tau;
    const Selection sel = ctx.select(PlanMethod::kKlas, spec);
    save_plan(sel.plan, ctx.path("ablations/tau_" + tau_label(tau) + ".json"), sel.inputs_digest);
    curves.push_back(plan_points(sel.plan.configs(), evals));
    sizes.push_back(sel.plan.size());
  }
  const auto aucs = plan_aucs(curves);
  auto out = open_csv(ctx.path("ablations/tau.csv"));
  out << "tau,plan_size,auc\n";
  for (std::size_t k = 0; k < aucs.size(); ++k) {
    out << tau_label(config_.ablation_taus[k]) << ',' << sizes[k] << ',' << format_double(aucs[k]) << '\n';
  }
}

void Pipeline::ablate_buckets() {
  Context ctx(*this);
  verify_sidecar(ctx.path("oracle/exhaustive.json"), ctx.oracle_inputs_digest(), "oracle");
  const auto evals = read_oracle(ctx.path("oracle/exhaustive.csv"));
  std::vector<std::vector<ParetoPoint>> curves;
  std::vector<std::size_t> sizes;
  for (std::size_t b : config_.ablation_buckets) {
    SelectionSpec spec = config_.selection;
    spec.num_buckets = b;
    const Selection sel = ctx.select(PlanMethod::kKlas, spec);
    save_plan(sel.plan, ctx.path("ablations/buckets_" + std::to_string(b) + ".json"), sel.inputs_digest);
    curves.push_back(plan_points(sel.plan.configs(), evals));
    sizes.push_back(sel.plan.size());
  }
  const auto aucs = plan_aucs(curves);
  auto out = open_csv(ctx.path("ablations/buckets.csv"));
  out << "buckets,plan_size,auc\n";
  for (std::size_t k = 0; k < aucs.size(); ++k) {
    out << config_.ablation_buckets[k] << ',' << sizes[k] << ',' << format_double(aucs[k]) << '\n';
  }
}

void Pipeline::report() {
  Context ctx(*this);
  ReportInputs inputs;
  std::vector<std::pair<std::string, std::vector<ParetoPoint>>> raw;
  std::map<std::string, std::vector<StitchConfig>> selected;

  for (PlanMethod m : {PlanMethod::kKlas, PlanMethod::kSnnet, PlanMethod::kMinKl}) {
    const auto csv = ctx.path("results/eval_" + to_string(m) + ".csv");
    if (m != PlanMethod::kKlas && !fs::exists(csv)) continue;
    require_file(csv, "evaluate --method " + to_string(m));
    // Walk the provenance chain plan → init → final → evaluation.
    const StitchPlan plan = ctx.plan(m);
    const auto groups = ctx.groups(plan);
    const std::string plan_digest = to_hex(file_digest(ctx.plan_path(m)));
    for (const auto& g : groups) {
      ctx.load_group(m, g, "init", plan_digest, "init-stitches");
      const auto init_file = ctx.stitch_path(m, g.source->id(), g.target->id(), "init");
      ctx.load_group(m, g, "final", to_hex(file_digest(init_file)), "finetune");
    }
    verify_sidecar(ctx.path("results/eval_" + to_string(m) + ".json"), ctx.evaluation_inputs_digest(m, groups),
                   "evaluate --method " + to_string(m));
    raw.emplace_back(to_string(m), read_evaluation_points(csv));
    selected[to_string(m)] = plan.configs();
  }

  const auto cascade_csv = ctx.path("results/cascade.csv");
  if (fs::exists(cascade_csv)) {
    verify_sidecar(ctx.path("results/cascade.json"), ctx.cascade_inputs_digest(), "evaluate");
    const CsvTable t = read_csv(cascade_csv);
    std::vector<ParetoPoint> pts;
    for (const auto& r : t.rows) {
      pts.push_back({"t=" + r[t.column("threshold")], cell_double(r[t.column("avg_flops")]),
                     cell_double(r[t.column("accuracy")])});
    }
    raw.emplace_back("cascade", pts);
  }

  const auto oracle_csv = ctx.path("oracle/exhaustive.csv");
  const bool have_oracle = fs::exists(oracle_csv);
  if (have_oracle) {
    verify_sidecar(ctx.path("oracle/exhaustive.json"), ctx.oracle_inputs_digest(), "oracle");
    verify_sidecar(ctx.path("oracle/metrics.json"), ctx.oracle_inputs_digest(), "oracle");
    const auto evals = read_oracle(oracle_csv);
    std::vector<ParetoPoint> pts;
    std::vector<StitchConfig> all;
    for (const auto& e : evals) {
      pts.push_back({e.config.key(), static_cast<double>(e.flops), e.accuracy});
      all.push_back(e.config);
    }
    raw.emplace_back("exhaustive", pts);

    // Reference set: configurations on the exhaustive Pareto front.
    std::set<std::string> front_keys;
    for (const auto& p : pareto_front(pts)) front_keys.insert(p.config_id);
    std::vector<StitchConfig> reference;
    for (const auto& c : all)
      if (front_keys.count(c.key())) reference.push_back(c);
    for (const auto& [method, configs] : selected) {
      inputs.overlaps.push_back({method, "exhaustive_front", overlap(configs, reference)});
    }

    const CsvTable m = read_csv(ctx.path("oracle/metrics.csv"));
    const auto [s, t] = ctx.klas_pair();
    const double target_acc = accuracy(t->forward(ctx.splits().test.inputs), ctx.splits().test.labels);
    std::vector<double> accs;
    for (const auto& r : m.rows) accs.push_back(target_acc - cell_double(r[m.column("delta_accuracy")]));
    std::map<std::string, std::vector<double>> scores;
    for (std::size_t c = 2; c < m.header.size(); ++c) {
      std::vector<double> col;
      bool finite = true;
      for (const auto& r : m.rows) {
        col.push_back(cell_double(r[c]));
        finite = finite && std::isfinite(col.back());
      }
      if (finite) scores[m.header[c]] = col;
    }
    inputs.correlations = correlation_study(scores, accs, target_acc);
  }

  std::vector<std::vector<ParetoPoint>> all_points;
  for (const auto& [name, pts] : raw) all_points.push_back(pts);
  const auto [lo, hi] = common_flops_bounds(all_points);
  for (auto& [name, pts] : raw) {
    if (pts.size() < 2) continue;
    inputs.curves.push_back(summarize_curve(name, pts, lo, hi));
  }
  inputs.metadata = {{"run_digest", to_hex(run_digest(config_, run_seed_))},
                     {"run_seed", std::to_string(run_seed_)},
                     {"flops_normalization", "global min/max over compared points"}};
  write_report(inputs, ctx.path("report"));
}

void Pipeline::study() {
  std::vector<SeedStudy> studies;
  for (auto seed : config_.seeds) {
    studies.push_back(run_study_seed(config_, seed, config_.threads));
    write_study_rows(studies.back(), dir_ / "study" / ("seed_" + std::to_string(seed) + ".csv"));
  }
  write_study_summary(studies, dir_ / "study" / "summary.csv");
}

}  // namespace stitchlab
