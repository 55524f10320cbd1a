#include "stitchlab/study.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <tuple>

#include "stitchlab/errors.hpp"
#include "stitchlab/evaluation.hpp"
#include "stitchlab/experiment.hpp"
#include "stitchlab/similarity.hpp"

namespace stitchlab {

bool weakly_dominates(double flops_a, double accuracy_a, double flops_b, double accuracy_b) {
  return flops_a <= flops_b && accuracy_a >= accuracy_b;
}

std::size_t nearest_cascade_point(std::span<const CascadePoint> points, double flops) {
  if (points.empty()) throw InvalidInput("nearest_cascade_point: no operating points");
  std::size_t best = 0;
  for (std::size_t k = 1; k < points.size(); ++k) {
    if (std::abs(points[k].avg_flops - flops) < std::abs(points[best].avg_flops - flops)) best = k;
  }
  return best;
}

SeedStudy run_study_seed(const ExperimentConfig& config, std::uint64_t seed, std::size_t threads) {
  const auto start = std::chrono::steady_clock::now();
  validate_config(config);
  SeedStudy study;
  study.seed = seed;
  const Splits splits = make_splits(config.dataset, seed);

  std::vector<AnchorModel> untrained;
  for (const auto& spec : config.anchors) {
    untrained.push_back(AnchorModel::create(spec.id, splits.train.input_dim(), splits.train.num_classes, spec.stages, 0));
  }
  std::vector<const AnchorModel*> ptrs;
  for (const auto& a : untrained) ptrs.push_back(&a);
  const auto ordered = order_by_flops(ptrs);
  const auto spec_of = [&](const std::string& id) -> const AnchorSpec& {
    for (const auto& s : config.anchors)
      if (s.id == id) return s;
    throw ConfigError("unknown anchor " + id);
  };

  auto source = std::make_shared<const AnchorModel>(
      build_anchor(config, spec_of(ordered.front()->id()), splits.train, seed));
  auto target = std::make_shared<const AnchorModel>(
      build_anchor(config, spec_of(ordered.back()->id()), splits.train, seed));
  study.source_id = source->id();
  study.target_id = target->id();
  study.source_accuracy = accuracy(source->forward(splits.test.inputs), splits.test.labels);
  study.target_accuracy = accuracy(target->forward(splits.test.inputs), splits.test.labels);

  const ProbeSet source_probes = build_probeset(config, *source, splits.train, nullptr, seed, false);
  const ProbeSet target_probes = build_probeset(config, *target, splits.train, nullptr, seed, false);
  const auto matrices = similarity_matrices(*source, source_probes, *target, target_probes, splits.val, threads);
  const auto capacity = intra_capacity(*target, target_probes, splits.val);
  const auto scored = score_configs(enumerate_configs(*source, *target), matrices, capacity);

  KlasOptions klas_opts;
  klas_opts.tau = config.selection.tau;
  klas_opts.tau_mode = config.selection.tau_mode;
  klas_opts.num_buckets = config.selection.num_buckets;
  const StitchPlan klas_plan = klas_select(scored, klas_opts, target->depth());
  const AnchorModel* chain[] = {source.get(), target.get()};
  const StitchPlan snnet_plan = snnet_baseline(chain, config.selection.snnet_mode);
  const std::size_t k = config.selection.minkl_k == 0 ? klas_plan.size() : config.selection.minkl_k;
  const StitchPlan minkl_plan = minkl_baseline(scored, k);

  const auto evaluations = exhaustive_oracle(config, source, target, splits, seed, threads);
  std::map<std::string, const StitchEvaluation*> by_key;
  for (const auto& e : evaluations) by_key[e.config.key()] = &e;

  std::vector<double> gammas, deltas;
  for (const auto& s : scored) {
    StudyRow row;
    row.config = s.config;
    row.score = s.score;
    row.accuracy = by_key.at(s.config.key())->accuracy;
    row.delta_accuracy = study.target_accuracy - row.accuracy;
    row.in_klas = klas_plan.contains(s.config);
    row.in_snnet = snnet_plan.contains(s.config);
    row.in_minkl = minkl_plan.contains(s.config);
    gammas.push_back(s.score.gamma);
    deltas.push_back(row.delta_accuracy);
    study.rows.push_back(row);
  }
  try {
    study.spearman_gamma = spearman(gammas, deltas);
  } catch (const NumericError&) {
    study.spearman_gamma = std::numeric_limits<double>::quiet_NaN();
  }

  const auto klas_configs = klas_plan.configs();
  const auto snnet_configs = snnet_plan.configs();
  study.klas_size = klas_configs.size();
  study.snnet_size = snnet_configs.size();
  study.minkl_size = minkl_plan.size();
  study.equal_size = std::min(study.klas_size, study.snnet_size);

  // Each comparison normalises FLOPs over the union of the two compared curves.
  const auto compare = [&](const std::vector<StitchConfig>& a, const std::vector<StitchConfig>& b) {
    const std::vector<std::vector<ParetoPoint>> curves{plan_points(a, evaluations), plan_points(b, evaluations)};
    const auto [clo, chi] = common_flops_bounds(curves);
    return std::pair{auc(curves[0], clo, chi), auc(curves[1], clo, chi)};
  };
  const auto klas_equal = subsample_by_flops(klas_configs, study.equal_size);
  const auto snnet_equal = subsample_by_flops(snnet_configs, study.equal_size);
  std::tie(study.auc_klas_equal, study.auc_snnet_equal) = compare(klas_equal, snnet_equal);
  std::tie(study.auc_klas, study.auc_minkl) = compare(klas_configs, minkl_plan.configs());

  study.cascade = cascade_operating_points(*source, *target, config.selection.cascade_thresholds, splits.test);
  for (const auto& p : plan_points(klas_configs, evaluations)) {
    const auto& c = study.cascade[nearest_cascade_point(study.cascade, p.flops)];
    if (weakly_dominates(p.flops, p.accuracy, c.avg_flops, c.accuracy)) ++study.cascade_dominating;
  }
  study.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return study;
}

void write_study_rows(const SeedStudy& study, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "config,i,j,flops,gamma,omega,sigma,accuracy,delta_accuracy,klas,snnet,minkl\n";
  for (const auto& r : study.rows) {
    out << r.config.key() << ',' << r.config.source_block << ',' << r.config.target_block << ',' << r.config.flops << ','
        << format_double(r.score.gamma) << ',' << format_double(r.score.omega) << ',' << format_double(r.score.sigma)
        << ',' << format_double(r.accuracy) << ',' << format_double(r.delta_accuracy) << ',' << r.in_klas << ','
        << r.in_snnet << ',' << r.in_minkl << '\n';
  }
}

void write_study_summary(std::span<const SeedStudy> studies, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "seed,source,target,source_accuracy,target_accuracy,spearman_gamma,klas_size,snnet_size,minkl_size,"
         "equal_size,auc_klas,auc_klas_equal,auc_snnet_equal,auc_minkl,cascade_dominating\n";
  for (const auto& s : studies) {
    out << s.seed << ',' << s.source_id << ',' << s.target_id << ',' << format_double(s.source_accuracy) << ','
        << format_double(s.target_accuracy) << ',' << format_double(s.spearman_gamma) << ',' << s.klas_size << ','
        << s.snnet_size << ',' << s.minkl_size << ',' << s.equal_size << ',' << format_double(s.auc_klas) << ','
        << format_double(s.auc_klas_equal) << ',' << format_double(s.auc_snnet_equal) << ','
        << format_double(s.auc_minkl) << ',' << s.cascade_dominating << '\n';
  }
}

}  // namespace stitchlab
