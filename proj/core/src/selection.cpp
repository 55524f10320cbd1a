#include "stitchlab/selection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <tuple>

#include "json_io.hpp"
#include "stitchlab/errors.hpp"

namespace stitchlab {

std::string StitchConfig::key() const {
  return source_id + ":" + std::to_string(source_block) + "->" + target_id + ":" + std::to_string(target_block);
}

StitchConfig make_stitch_config(const AnchorModel& source, const AnchorModel& target, std::size_t source_block,
                                std::size_t target_block) {
  if (!(flops(source) < flops(target))) {
    throw InvalidInput("stitch direction: source '" + source.id() + "' must have lower FLOPs than target '" +
                       target.id() + "'");
  }
  if (source_block < 1 || source_block > source.depth()) throw InvalidInput("stitch: source block out of range");
  if (target_block < 1 || target_block > target.depth()) throw InvalidInput("stitch: target block out of range");
  if (source.stage_of(source_block) != target.stage_of(target_block)) {
    throw InvalidInput("stitch: blocks " + std::to_string(source_block) + " and " + std::to_string(target_block) +
                       " are in different stages");
  }
  StitchConfig c;
  c.source_id = source.id();
  c.target_id = target.id();
  c.stage = source.stage_of(source_block);
  c.source_block = source_block;
  c.target_block = target_block;
  c.flops = prefix_flops(source, source_block) +
            affine_flops(source.width_at(source_block), target.width_at(target_block)) +
            suffix_flops(target, target_block) + head_flops(target);
  return c;
}

std::vector<StitchConfig> enumerate_configs(const AnchorModel& source, const AnchorModel& target) {
  std::vector<StitchConfig> out;
  for (std::size_t i = 1; i <= source.depth(); ++i) {
    for (std::size_t j = 1; j <= target.depth(); ++j) {
      if (source.stage_of(i) == target.stage_of(j)) out.push_back(make_stitch_config(source, target, i, j));
    }
  }
  return out;
}

StitchScore stitch_score(double omega, double sigma) {
  return {omega / std::max(sigma, kSigmaFloor), omega, sigma};
}

StitchScore stitch_score(const SimilarityMatrix& matrix, const IntraCapacityVector& capacity, std::size_t source_block,
                         std::size_t target_block) {
  return stitch_score(matrix.at(source_block, target_block), capacity.at(target_block));
}

std::vector<ScoredConfig> score_configs(std::span<const StitchConfig> configs, std::span<const SimilarityMatrix> matrices,
                                        const IntraCapacityVector& capacity) {
  std::vector<ScoredConfig> out;
  out.reserve(configs.size());
  for (const auto& c : configs) {
    const auto m = std::find_if(matrices.begin(), matrices.end(), [&](const SimilarityMatrix& sm) {
      return sm.source_id == c.source_id && sm.target_id == c.target_id && sm.stage == c.stage;
    });
    if (m == matrices.end()) throw InvalidInput("score_configs: no similarity matrix for " + c.key());
    out.push_back({c, stitch_score(*m, capacity, c.source_block, c.target_block)});
  }
  return out;
}

bool config_less(const StitchConfig& a, const StitchConfig& b) {
  return std::tie(a.flops, a.source_id, a.source_block, a.target_id, a.target_block) <
         std::tie(b.flops, b.source_id, b.source_block, b.target_id, b.target_block);
}

bool better_candidate(const ScoredConfig& a, const ScoredConfig& b) {
  if (a.score.gamma != b.score.gamma) return a.score.gamma < b.score.gamma;
  return std::tie(a.config.flops, a.config.source_block, a.config.target_block, a.config.source_id, a.config.target_id) <
         std::tie(b.config.flops, b.config.source_block, b.config.target_block, b.config.source_id, b.config.target_id);
}

bool Bucket::admits(std::uint64_t f) const {
  const auto x = static_cast<double>(f);
  return x >= lo && (x < hi || (closed_right && x <= hi));
}

std::vector<Bucket> build_buckets(std::span<const ScoredConfig> configs, std::size_t num_buckets) {
  if (num_buckets < 1) throw InvalidInput("build_buckets: num_buckets must be >= 1");
  if (configs.empty()) throw InvalidInput("build_buckets: no configs");
  const auto [lo_it, hi_it] = std::minmax_element(configs.begin(), configs.end(), [](const auto& a, const auto& b) {
    return a.config.flops < b.config.flops;
  });
  const double lo = static_cast<double>(lo_it->config.flops);
  const double hi = static_cast<double>(hi_it->config.flops);
  const double width = (hi - lo) / static_cast<double>(num_buckets);

  std::vector<Bucket> buckets(num_buckets);
  for (std::size_t k = 0; k < num_buckets; ++k) {
    buckets[k].lo = lo + static_cast<double>(k) * width;
    buckets[k].hi = k + 1 == num_buckets ? hi : lo + static_cast<double>(k + 1) * width;
    buckets[k].closed_right = k + 1 == num_buckets;
  }
  for (const auto& c : configs) {
    // Interval ends are shared between neighbours, so exactly one bucket admits every config.
    auto it = std::find_if(buckets.begin(), buckets.end(), [&](const Bucket& b) { return b.admits(c.config.flops); });
    it->members.push_back(c);
  }
  for (auto& b : buckets) {
    std::sort(b.members.begin(), b.members.end(),
              [](const ScoredConfig& a, const ScoredConfig& c) { return config_less(a.config, c.config); });
  }
  return buckets;
}

std::string to_string(PlanMethod m) {
  switch (m) {
    case PlanMethod::kKlas: return "klas";
    case PlanMethod::kSnnet: return "snnet";
    case PlanMethod::kMinKl: return "minkl";
    case PlanMethod::kExhaustive: return "exhaustive";
  }
  return "unknown";
}

PlanMethod plan_method_from_string(const std::string& name) {
  if (name == "klas") return PlanMethod::kKlas;
  if (name == "snnet") return PlanMethod::kSnnet;
  if (name == "minkl") return PlanMethod::kMinKl;
  if (name == "exhaustive") return PlanMethod::kExhaustive;
  throw InvalidInput("unknown method '" + name + "'");
}

std::string to_string(TauMode m) { return m == TauMode::kRelative ? "relative" : "absolute"; }

std::string to_string(SnnetMode m) { return m == SnnetMode::kPaired ? "paired" : "unpaired"; }

std::vector<StitchConfig> StitchPlan::configs() const {
  std::vector<StitchConfig> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(e.config);
  return out;
}

bool StitchPlan::contains(const StitchConfig& c) const {
  return std::any_of(entries.begin(), entries.end(), [&](const PlanEntry& e) { return e.config == c; });
}

void canonicalize(StitchPlan& plan) {
  std::stable_sort(plan.entries.begin(), plan.entries.end(),
                   [](const PlanEntry& a, const PlanEntry& b) { return config_less(a.config, b.config); });
  plan.entries.erase(std::unique(plan.entries.begin(), plan.entries.end(),
                                 [](const PlanEntry& a, const PlanEntry& b) { return a.config == b.config; }),
                     plan.entries.end());
}

void require_target_coverage(const StitchPlan& plan, std::span<const std::size_t> target_blocks) {
  for (auto j : target_blocks) {
    const bool covered = std::any_of(plan.entries.begin(), plan.entries.end(),
                                     [j](const PlanEntry& e) { return e.config.target_block == j; });
    if (!covered) throw InvalidInput("stitch plan leaves target block " + std::to_string(j) + " uncovered");
  }
}

StitchPlan select_candidates(std::span<const Bucket> buckets, double tau, TauMode mode, bool enforce_coverage) {
  if (!(tau >= 0.0) || !std::isfinite(tau)) throw InvalidInput("select_candidates: tau must be finite and >= 0");
  StitchPlan plan;
  plan.method = PlanMethod::kKlas;
  plan.tau = tau;
  plan.tau_mode = mode;

  std::size_t total = 0;
  for (std::size_t b = 0; b < buckets.size(); ++b) {
    const auto& bucket = buckets[b];
    plan.buckets.push_back({bucket.lo, bucket.hi, bucket.members.size()});
    total += bucket.members.size();
    if (bucket.members.empty()) continue;
    const auto best = std::min_element(bucket.members.begin(), bucket.members.end(), better_candidate);
    const double cutoff = mode == TauMode::kRelative ? (1.0 + tau) * best->score.gamma : tau;
    for (const auto& m : bucket.members) {
      if (&m == &*best || m.score.gamma <= cutoff) plan.entries.push_back({m.config, m.score, b});
    }
  }
  if (total == 0) throw InvalidInput("select_candidates: empty config set");

  if (enforce_coverage) {
    std::map<std::size_t, std::pair<const ScoredConfig*, std::size_t>> best_per_target;
    for (std::size_t b = 0; b < buckets.size(); ++b) {
      for (const auto& m : buckets[b].members) {
        auto [it, inserted] = best_per_target.try_emplace(m.config.target_block, &m, b);
        if (!inserted && better_candidate(m, *it->second.first)) it->second = {&m, b};
      }
    }
    for (const auto& [j, pick] : best_per_target) {
      const bool covered = std::any_of(plan.entries.begin(), plan.entries.end(),
                                       [j = j](const PlanEntry& e) { return e.config.target_block == j; });
      if (!covered) plan.entries.push_back({pick.first->config, pick.first->score, pick.second});
    }
  }
  canonicalize(plan);
  return plan;
}

std::pair<const AnchorModel*, const AnchorModel*> select_anchor_pair(std::span<const AnchorModel* const> pool,
                                                                     const Dataset& val,
                                                                     std::vector<AnchorPairKl>* table) {
  if (pool.size() < 2) throw InvalidInput("anchor selection needs at least two anchors");
  std::pair<const AnchorModel*, const AnchorModel*> best{nullptr, nullptr};
  double best_kl = std::numeric_limits<double>::infinity();
  for (const auto* a : pool) {
    for (const auto* b : pool) {
      if (a == b || !(flops(*a) < flops(*b))) continue;
      const double kl = last_block_kl(*a, *b, val);
      if (table) table->push_back({a->id(), b->id(), kl});
      if (kl < best_kl) {
        best_kl = kl;
        best = {a, b};
      }
    }
  }
  if (!best.first) throw InvalidInput("anchor selection: no pair with strictly increasing FLOPs");
  return best;
}

StitchPlan klas_select(std::span<const ScoredConfig> scored, const KlasOptions& options, std::size_t target_depth) {
  const std::size_t num_buckets = options.num_buckets == 0 ? target_depth : options.num_buckets;
  const auto buckets = build_buckets(scored, num_buckets);
  StitchPlan plan = select_candidates(buckets, options.tau, options.tau_mode, true);
  std::set<std::size_t> targets;
  for (const auto& s : scored) targets.insert(s.config.target_block);
  require_target_coverage(plan, std::vector<std::size_t>(targets.begin(), targets.end()));
  return plan;
}

KlasResult klas(std::span<const AnchorModel* const> pool, std::span<const ProbeSet* const> probesets, const Dataset& val,
                const KlasOptions& options) {
  KlasResult result;
  const auto [source, target] = select_anchor_pair(pool, val, &result.pair_kls);
  const auto find_probes = [&](const AnchorModel& a) -> const ProbeSet& {
    for (const auto* p : probesets)
      if (p->anchor_id == a.id()) return *p;
    throw InvalidInput("klas: no probe set for anchor '" + a.id() + "'");
  };
  result.source = source;
  result.target = target;
  result.matrices = similarity_matrices(*source, find_probes(*source), *target, find_probes(*target), val, options.threads);
  result.capacity = intra_capacity(*target, find_probes(*target), val);
  const auto configs = enumerate_configs(*source, *target);
  result.scored = score_configs(configs, result.matrices, result.capacity);
  result.plan = klas_select(result.scored, options, target->depth());
  return result;
}

std::size_t paired_target_block(std::size_t source_block, std::size_t source_depth, std::size_t target_depth) {
  const double ratio = static_cast<double>(source_block) * static_cast<double>(target_depth) / static_cast<double>(source_depth);
  const auto j = static_cast<std::size_t>(std::llround(ratio));
  return std::clamp<std::size_t>(j, 1, target_depth);
}

StitchPlan snnet_baseline(std::span<const AnchorModel* const> chain, SnnetMode mode) {
  StitchPlan plan;
  plan.method = PlanMethod::kSnnet;
  for (std::size_t k = 0; k + 1 < chain.size(); ++k) {
    const AnchorModel& f = *chain[k];
    const AnchorModel& g = *chain[k + 1];
    if (!(flops(f) < flops(g))) throw InvalidInput("snnet_baseline: chain must be ordered by increasing FLOPs");
    for (std::size_t i = 1; i <= f.depth(); ++i) {
      const std::size_t paired = paired_target_block(i, f.depth(), g.depth());
      std::vector<std::size_t> targets{paired};
      if (mode == SnnetMode::kUnpaired) {
        if (paired > 1) targets.push_back(paired - 1);
        if (paired < g.depth()) targets.push_back(paired + 1);
      }
      for (auto j : targets) {
        if (f.stage_of(i) != g.stage_of(j)) continue;
        plan.entries.push_back({make_stitch_config(f, g, i, j), std::nullopt, std::nullopt});
      }
    }
  }
  canonicalize(plan);
  return plan;
}

StitchPlan minkl_baseline(std::span<const ScoredConfig> scored, std::size_t k) {
  if (k < 1) throw InvalidInput("minkl_baseline: k must be >= 1");
  StitchPlan plan;
  plan.method = PlanMethod::kMinKl;
  if (k > scored.size()) {
    plan.warnings.push_back("k=" + std::to_string(k) + " exceeds " + std::to_string(scored.size()) +
                            " available configs; clamped");
    k = scored.size();
  }
  std::vector<ScoredConfig> sorted(scored.begin(), scored.end());
  std::stable_sort(sorted.begin(), sorted.end(), [](const ScoredConfig& a, const ScoredConfig& b) {
    if (a.score.omega != b.score.omega) return a.score.omega < b.score.omega;
    return std::tie(a.config.flops, a.config.source_block, a.config.target_block) <
           std::tie(b.config.flops, b.config.source_block, b.config.target_block);
  });
  for (std::size_t n = 0; n < k; ++n) plan.entries.push_back({sorted[n].config, sorted[n].score, std::nullopt});
  canonicalize(plan);
  return plan;
}

std::vector<CascadePoint> cascade_operating_points(const AnchorModel& small, const AnchorModel& big,
                                                   std::span<const double> thresholds, const Dataset& eval) {
  if (eval.size() == 0) throw InvalidInput("cascade: empty evaluation set");
  const Tensor small_probs = small.forward(eval.inputs);
  const Tensor big_probs = big.forward(eval.inputs);
  const auto small_pred = argmax_rows(small_probs);
  const auto big_pred = argmax_rows(big_probs);
  const double n = static_cast<double>(eval.size());
  const double small_flops = static_cast<double>(flops(small));
  const double big_flops = static_cast<double>(flops(big));

  std::vector<CascadePoint> points;
  for (double t : thresholds) {
    if (!(t > 0.0 && t <= 1.0)) throw InvalidInput("cascade: thresholds must lie in (0, 1]");
    std::size_t routed = 0;
    std::size_t correct = 0;
    for (std::size_t r = 0; r < eval.size(); ++r) {
      const auto row = small_probs.row(r);
      const double confidence = *std::max_element(row.begin(), row.end());
      const bool escalate = confidence < t;
      routed += escalate ? 1 : 0;
      correct += (escalate ? big_pred[r] : small_pred[r]) == eval.labels[r] ? 1 : 0;
    }
    const double fraction = static_cast<double>(routed) / n;
    points.push_back({t, small_flops + fraction * big_flops, static_cast<double>(correct) / n, fraction});
  }
  return points;
}

namespace {

detail::json config_to_json(const StitchConfig& c) {
  return {{"source_id", c.source_id}, {"target_id", c.target_id}, {"stage", c.stage},
          {"i", c.source_block},      {"j", c.target_block},      {"flops", c.flops}};
}

StitchConfig config_from_json(const detail::json& j) {
  using detail::field;
  StitchConfig c;
  c.source_id = field(j, "source_id").get<std::string>();
  c.target_id = field(j, "target_id").get<std::string>();
  c.stage = field(j, "stage").get<std::size_t>();
  c.source_block = field(j, "i").get<std::size_t>();
  c.target_block = field(j, "j").get<std::size_t>();
  c.flops = field(j, "flops").get<std::uint64_t>();
  return c;
}

}  // namespace

void save_plan(const StitchPlan& plan, const std::filesystem::path& path, const std::string& inputs_digest) {
  using detail::json;
  json buckets = json::array();
  for (const auto& b : plan.buckets) buckets.push_back({{"lo", b.lo}, {"hi", b.hi}, {"size", b.size}});
  json entries = json::array();
  for (const auto& e : plan.entries) {
    json je = config_to_json(e.config);
    je["gamma"] = e.score ? json(e.score->gamma) : json(nullptr);
    je["omega"] = e.score ? json(e.score->omega) : json(nullptr);
    je["sigma"] = e.score ? json(e.score->sigma) : json(nullptr);
    je["bucket"] = e.bucket ? json(*e.bucket) : json(nullptr);
    entries.push_back(je);
  }
  const json doc{{"format", "stitchlab.plan"},
                 {"version", 1},
                 {"method", to_string(plan.method)},
                 {"tau", plan.tau},
                 {"tau_mode", to_string(plan.tau_mode)},
                 {"buckets", buckets},
                 {"configs", entries},
                 {"warnings", plan.warnings},
                 {"inputs_digest", inputs_digest}};
  detail::write_json_file(doc, path);
}

StitchPlan load_plan(const std::filesystem::path& path, std::string* inputs_digest) {
  using detail::field;
  const auto doc = detail::read_json_file(path);
  detail::require_format(doc, "stitchlab.plan", 1, path);
  StitchPlan plan;
  try {
    plan.method = plan_method_from_string(field(doc, "method").get<std::string>());
    plan.tau = field(doc, "tau").get<double>();
    plan.tau_mode = field(doc, "tau_mode").get<std::string>() == "absolute" ? TauMode::kAbsolute : TauMode::kRelative;
    for (const auto& b : field(doc, "buckets")) {
      plan.buckets.push_back({field(b, "lo").get<double>(), field(b, "hi").get<double>(), field(b, "size").get<std::size_t>()});
    }
    for (const auto& je : field(doc, "configs")) {
      PlanEntry e;
      e.config = config_from_json(je);
      if (!field(je, "gamma").is_null()) {
        e.score = StitchScore{je.at("gamma").get<double>(), field(je, "omega").get<double>(), field(je, "sigma").get<double>()};
      }
      if (!field(je, "bucket").is_null()) e.bucket = je.at("bucket").get<std::size_t>();
      plan.entries.push_back(std::move(e));
    }
    plan.warnings = field(doc, "warnings").get<std::vector<std::string>>();
    if (inputs_digest) *inputs_digest = field(doc, "inputs_digest").get<std::string>();
  } catch (const detail::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return plan;
}

}  // namespace stitchlab
