// Acceptance suite: one PASS/FAIL line per criterion. Optional arguments select
// criteria by number, e.g. `stitchlab_acceptance 1 7`.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "stitchlab/anchors.hpp"
#include "stitchlab/config.hpp"
#include "stitchlab/evaluation.hpp"
#include "stitchlab/linalg.hpp"
#include "stitchlab/pipeline.hpp"
#include "stitchlab/probenet.hpp"
#include "stitchlab/selection.hpp"
#include "stitchlab/similarity.hpp"
#include "stitchlab/stitching.hpp"
#include "stitchlab/study.hpp"
#include "test_support.hpp"

using namespace stitchlab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int precision = 4) {
  std::ostringstream s;
  s.precision(precision);
  s << v;
  return s.str();
}

// 1 ------------------------------------------------------------------------
Outcome criterion_eq3() {
  Rng rng(20240601);
  std::size_t mismatches = 0;
  double selection_seconds = 0.0;
  const auto t0 = Clock::now();
  for (int instance = 0; instance < 100; ++instance) {
    const auto configs = testing::random_scored_configs(rng, 1 + rng.below(200));
    const std::size_t nb = 1 + rng.below(25);
    const double tau = rng.uniform() < 0.2 ? 0.0 : rng.uniform(0.0, 0.25);
    const auto t1 = Clock::now();
    const auto plan = select_candidates(build_buckets(configs, nb), tau, TauMode::kRelative, false);
    selection_seconds += seconds_since(t1);
    if (testing::plan_keys(plan) != testing::brute_force_candidates(configs, nb, tau)) ++mismatches;
  }
  const double total = seconds_since(t0);
  return {mismatches == 0 && total < 5.0, "mismatches=" + std::to_string(mismatches) + " select_time=" +
                                              fmt(selection_seconds) + "s total=" + fmt(total) + "s"};
}

// 2 ------------------------------------------------------------------------
Outcome criterion_kl() {
  Rng rng(7);
  double min_kl = 0.0, max_self = 0.0;
  for (int k = 0; k < 10000; ++k) {
    const auto n = 2 + rng.below(15);
    const auto p = testing::random_distribution(n, rng);
    const auto q = testing::random_distribution(n, rng);
    min_kl = std::min(min_kl, kl_divergence(p, q));
    max_self = std::max(max_self, kl_divergence(p, p));
  }

  // Θ on trained probes against an independent double loop over the validation rows.
  const auto w = testing::make_tiny_world(17);
  double theta_err = 0.0;
  for (std::size_t i = 1; i <= w.small.depth(); ++i)
    for (std::size_t j = 1; j <= w.large.depth(); ++j) {
      const Tensor p = w.small_probes.probe(i).distributions(w.small.forward_prefix(i, w.splits.val.inputs));
      const Tensor q = w.large_probes.probe(j).distributions(w.large.forward_prefix(j, w.splits.val.inputs));
      double sum = 0.0;
      for (std::size_t r = 0; r < p.rows(); ++r) {
        double row = 0.0;
        for (std::size_t c = 0; c < p.cols(); ++c) row += p(r, c) * std::log((p(r, c) + 1e-12) / (q(r, c) + 1e-12));
        sum += row;
      }
      const double oracle = sum / static_cast<double>(p.rows());
      theta_err = std::max(theta_err, std::abs(theta(w.small_probes, w.small, w.large_probes, w.large, i, j, w.splits.val) - oracle));
    }

  const std::vector<double> a{0.9, 0.1}, b{0.5, 0.5};
  const double ab = kl_divergence(a, b), ba = kl_divergence(b, a);
  const double ab_direct = 0.9 * std::log(0.9 / 0.5) + 0.1 * std::log(0.1 / 0.5);
  const double ba_direct = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
  const bool asym = std::abs(ab - 0.3681) < 1e-3 && std::abs(ba - 0.5108) < 1e-3 && std::abs(ab - ab_direct) < 1e-3 &&
                    std::abs(ba - ba_direct) < 1e-3 && ab != ba;

  const bool pass = min_kl >= -1e-9 && max_self <= 1e-10 && theta_err <= 1e-12 && asym;
  return {pass, "min_kl=" + fmt(min_kl) + " max_kl_pp=" + fmt(max_self) + " theta_err=" + fmt(theta_err) +
                    " kl(p,q)=" + fmt(ab) + " kl(q,p)=" + fmt(ba)};
}

// 3 ------------------------------------------------------------------------
Outcome criterion_stitch_init() {
  Rng rng(3);
  const StitchConfig config;
  double worst_linear = 0.0, worst_identity = 0.0;
  std::size_t improvements = 0;
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t in = 2 + rng.below(10), out = 2 + rng.below(10), rows = 64 + rng.below(64);
    const Tensor src = testing::random_tensor(rows, in, rng);
    const Tensor m = testing::random_tensor(in, out, rng), c = testing::random_tensor(1, out, rng);
    const Tensor tgt = affine(src, m, c);
    const auto fit = init_stitch_layer(config, src, tgt);
    worst_linear = std::max(worst_linear, affine_residual(AffineMap{fit.weight, fit.bias}, src, tgt));

    const auto id = init_stitch_layer(config, src, src);
    for (std::size_t r = 0; r < in; ++r)
      for (std::size_t k = 0; k < in; ++k)
        worst_identity = std::max(worst_identity, std::abs(id.weight(r, k) - (r == k ? 1.0 : 0.0)));
    for (double v : id.bias.values()) worst_identity = std::max(worst_identity, std::abs(v));
  }

  const Tensor src = testing::random_tensor(80, 6, rng), tgt = testing::random_tensor(80, 5, rng);
  const auto fit = init_stitch_layer(config, src, tgt);
  const double best = affine_residual(AffineMap{fit.weight, fit.bias}, src, tgt);
  for (int k = 0; k < 100; ++k) {
    Tensor dw = testing::random_tensor(6, 5, rng), db = testing::random_tensor(1, 5, rng);
    double norm = 0.0;
    for (double v : dw.values()) norm += v * v;
    for (double v : db.values()) norm += v * v;
    norm = std::sqrt(norm);
    Tensor w = fit.weight, b = fit.bias;
    for (std::size_t t = 0; t < w.size(); ++t) w.values()[t] += 1e-3 * dw.values()[t] / norm;
    for (std::size_t t = 0; t < b.size(); ++t) b.values()[t] += 1e-3 * db.values()[t] / norm;
    if (affine_residual(AffineMap{w, b}, src, tgt) < best) ++improvements;
  }
  const bool pass = worst_linear < 1e-8 && worst_identity <= 1e-6 && improvements == 0;
  return {pass, "linear_residual=" + fmt(worst_linear) + " identity_err=" + fmt(worst_identity) +
                    " improving_perturbations=" + std::to_string(improvements) + "/100"};
}

// 4 ------------------------------------------------------------------------
Outcome criterion_amortization() {
  const Dataset d = gen_blobs(4, 77, 6, 1.0, 2);  // N = 308
  bool pass = true;
  std::ostringstream detail;
  for (std::size_t depth : {1u, 4u, 8u}) {
    AnchorModel m = make_mlp_anchor("m", 6, 4, 10, depth, depth);
    m.freeze();
    for (std::size_t batch : {16u, 64u, 500u}) {
      ProbeTrainOptions o;
      o.epochs = 3;
      o.batch_size = batch;
      o.record_trace = false;
      m.reset_forward_passes();
      const ProbeSet set = train_probeset(m, d, o);
      const std::uint64_t expected = (d.size() + batch - 1) / batch * o.epochs;
      const bool ok = m.forward_passes() == expected && set.training_forward_passes == expected;
      pass = pass && ok;
      detail << " probes=" << depth << "/batch=" << batch << ":" << m.forward_passes() << (ok ? "" : "!=") << (ok ? "" : std::to_string(expected));
    }
  }
  return {pass, "passes" + detail.str()};
}

// 5 ------------------------------------------------------------------------
double rel_err(double analytic, double fd) { return std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-8}); }

Outcome criterion_gradients() {
  Rng rng(5);
  double worst_probe = 0.0, worst_stitch = 0.0;
  const double h = 1e-6;
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor a = testing::random_tensor(8, 8, rng);
    const auto labels = testing::random_labels(8, 8, rng);
    Probe p;
    p.weight = testing::random_tensor(8, 8, rng, 0.3);
    p.bias = testing::random_tensor(1, 8, rng, 0.3);
    const auto g = affine_backward(a, p.weight, softmax_cross_entropy_grad(p.distributions(a), labels));
    for (std::size_t k = 0; k < p.weight.size(); ++k) {
      Probe up = p, dn = p;
      up.weight.values()[k] += h;
      dn.weight.values()[k] -= h;
      const double fd = (mean_cross_entropy(up.distributions(a), labels) - mean_cross_entropy(dn.distributions(a), labels)) / (2 * h);
      worst_probe = std::max(worst_probe, rel_err(g.weight.values()[k], fd));
    }
    for (std::size_t k = 0; k < p.bias.size(); ++k) {
      Probe up = p, dn = p;
      up.bias.values()[k] += h;
      dn.bias.values()[k] -= h;
      const double fd = (mean_cross_entropy(up.distributions(a), labels) - mean_cross_entropy(dn.distributions(a), labels)) / (2 * h);
      worst_probe = std::max(worst_probe, rel_err(g.bias.values()[k], fd));
    }

    auto src = std::make_shared<AnchorModel>(make_mlp_anchor("s", 8, 8, 8, 2, 10 + trial));
    auto tgt = std::make_shared<AnchorModel>(make_mlp_anchor("t", 8, 8, 8, 3, 20 + trial));
    src->freeze();
    tgt->freeze();
    const StitchConfig c = make_stitch_config(*src, *tgt, 1 + rng.below(2), 1 + rng.below(2));
    StitchPlan plan;
    plan.entries.push_back({c, std::nullopt, std::nullopt});
    StitchedSupernet net(src, tgt, plan);
    const Tensor x = testing::random_tensor(8, 8, rng);
    StitchLayer layer = net.layer(c);
    layer.weight = testing::random_tensor(8, 8, rng, 0.5);
    layer.bias = testing::random_tensor(1, 8, rng, 0.5);
    const auto sg = stitch_loss_and_grad(net, layer, x, labels);
    for (std::size_t k = 0; k < layer.weight.size(); ++k) {
      StitchLayer up = layer, dn = layer;
      up.weight.values()[k] += h;
      dn.weight.values()[k] -= h;
      const double fd = (stitch_loss_and_grad(net, up, x, labels).loss - stitch_loss_and_grad(net, dn, x, labels).loss) / (2 * h);
      worst_stitch = std::max(worst_stitch, rel_err(sg.grad_weight.values()[k], fd));
    }
    for (std::size_t k = 0; k < layer.bias.size(); ++k) {
      StitchLayer up = layer, dn = layer;
      up.bias.values()[k] += h;
      dn.bias.values()[k] -= h;
      const double fd = (stitch_loss_and_grad(net, up, x, labels).loss - stitch_loss_and_grad(net, dn, x, labels).loss) / (2 * h);
      worst_stitch = std::max(worst_stitch, rel_err(sg.grad_bias.values()[k], fd));
    }
  }
  return {worst_probe <= 1e-4 && worst_stitch <= 1e-4,
          "max_rel_err probe=" + fmt(worst_probe) + " stitch=" + fmt(worst_stitch)};
}

// 6 ------------------------------------------------------------------------
Outcome criterion_study() {
  const ExperimentConfig config = default_config();
  std::vector<SeedStudy> studies;
  std::size_t rank = 0, snnet = 0, minkl = 0, cascade = 0;
  double worst_seconds = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SeedStudy s = run_study_seed(config, seed, 1);
    rank += s.rank_ok();
    snnet += s.beats_snnet();
    minkl += s.beats_minkl();
    cascade += s.dominates_cascade();
    worst_seconds = std::max(worst_seconds, s.seconds);
    std::cout << "  seed " << seed << ": " << s.source_id << "->" << s.target_id << " acc " << fmt(s.source_accuracy)
              << "/" << fmt(s.target_accuracy) << " spearman(gamma,dAcc)=" << fmt(s.spearman_gamma)
              << " auc klas@" << s.equal_size << "=" << fmt(s.auc_klas_equal) << " snnet=" << fmt(s.auc_snnet_equal)
              << " | klas@" << s.klas_size << "=" << fmt(s.auc_klas) << " minkl@" << s.minkl_size << "=" << fmt(s.auc_minkl)
              << " | cascade dominated by " << s.cascade_dominating << "/" << s.klas_size << " klas points"
              << " | " << fmt(s.seconds, 3) << "s\n";
    studies.push_back(std::move(s));
  }
  const fs::path out = fs::current_path() / "acceptance_study_summary.csv";
  write_study_summary(studies, out);

  const bool a = rank >= 4, b = snnet >= 4, c = minkl >= 4, d = cascade >= 3, t = worst_seconds < 15 * 60;
  std::ostringstream detail;
  detail << "(a) rank " << rank << "/5 " << (a ? "ok" : "FAIL") << "; (b) snnet " << snnet << "/5 " << (b ? "ok" : "FAIL")
         << "; (c) minkl " << minkl << "/5 " << (c ? "ok" : "FAIL") << "; (d) cascade " << cascade << "/5 "
         << (d ? "ok" : "FAIL") << "; max seed time " << fmt(worst_seconds, 3) << "s";
  return {a && b && c && d && t, detail.str()};
}

// 7 ------------------------------------------------------------------------
Outcome criterion_auc() {
  const auto curve = [](std::initializer_list<std::pair<double, double>> xy) {
    std::vector<ParetoPoint> out;
    for (auto [f, a] : xy) out.push_back({"p" + std::to_string(out.size()), f, a});
    return out;
  };
  double analytic_err = 0.0;
  analytic_err = std::max(analytic_err, std::abs(auc(curve({{0, 0.5}, {1, 1.0}}), 0, 1) - 0.75));
  analytic_err = std::max(analytic_err, std::abs(auc(curve({{0, 0.7}, {1, 0.7}}), 0, 1) - 0.7));
  analytic_err = std::max(analytic_err, std::abs(auc(curve({{0.25, 0.5}, {0.75, 1.0}}), 0, 1) - 0.75));
  analytic_err = std::max(analytic_err, std::abs(auc(curve({{0, 0.2}, {0.5, 0.6}, {1, 0.7}}), 0, 1) - 0.525));
  analytic_err = std::max(analytic_err, std::abs(auc(curve({{0, 0.2}, {0.5, 0.6}, {0.7, 0.3}, {1, 0.7}}), 0, 1) - 0.525));
  analytic_err = std::max(analytic_err, std::abs(auc(curve({{20, 0.4}, {60, 0.8}}), 0, 100) - (0.2 * 0.4 + 0.4 * 0.6 + 0.4 * 0.8)));

  Rng rng(11);
  bool idempotent = true;
  double rescale_err = 0.0;
  for (int k = 0; k < 200; ++k) {
    std::vector<ParetoPoint> pts;
    const auto n = 2 + rng.below(40);
    for (std::size_t t = 0; t < n; ++t) pts.push_back({"p" + std::to_string(t), std::floor(rng.uniform(100, 200)), rng.uniform()});
    const auto once = pareto_front(pts);
    const auto twice = pareto_front(once);
    idempotent = idempotent && once.size() == twice.size() &&
                 std::equal(once.begin(), once.end(), twice.begin(), [](const ParetoPoint& a, const ParetoPoint& b) {
                   return a.config_id == b.config_id && a.flops == b.flops && a.accuracy == b.accuracy;
                 });
    const double base = auc(pts, 100, 200);
    const double s = rng.uniform(1e-3, 1e3);
    auto scaled = pts;
    for (auto& p : scaled) p.flops *= s;
    rescale_err = std::max(rescale_err, std::abs(auc(scaled, 100 * s, 200 * s) - base));
  }
  return {analytic_err <= 1e-12 && idempotent && rescale_err <= 1e-12,
          "analytic_err=" + fmt(analytic_err) + " idempotent=" + (idempotent ? "yes" : "no") + " rescale_err=" + fmt(rescale_err)};
}

// 8 ------------------------------------------------------------------------
std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome criterion_determinism() {
  ExperimentConfig config = load_config(fs::path(STITCHLAB_SOURCE_DIR) / "configs" / "smoke.json");
  const fs::path root = fs::temp_directory_path() / "stitchlab-acceptance-determinism";
  fs::remove_all(root);
  std::vector<fs::path> dirs;
  for (const char* name : {"a", "b"}) {
    ExperimentConfig c = config;
    c.output_dir = (root / name).string();
    Pipeline p(c);
    p.run_all();
    dirs.push_back(p.dir());
  }
  std::size_t compared = 0, differing = 0;
  for (const auto& entry : fs::directory_iterator(dirs[0] / "report")) {
    if (entry.path().extension() != ".csv") continue;
    ++compared;
    if (slurp(entry.path()) != slurp(dirs[1] / "report" / entry.path().filename())) ++differing;
  }
  return {compared >= 4 && differing == 0,
          "report_csvs=" + std::to_string(compared) + " differing=" + std::to_string(differing)};
}

// 9 ------------------------------------------------------------------------
Outcome criterion_cka() {
  Rng rng(9);
  double self_err = 0.0, orth_err = 0.0, lo = 1.0, hi = 0.0;
  for (int k = 0; k < 20; ++k) {
    const std::size_t n = 20 + rng.below(40), d = 2 + rng.below(8);
    const Tensor f = testing::random_tensor(n, d, rng);
    self_err = std::max(self_err, std::abs(cka(f, f) - 1.0));
    // Random orthogonal matrix from modified Gram-Schmidt on a Gaussian matrix.
    Tensor q = testing::random_tensor(d, d, rng);
    for (std::size_t c = 0; c < d; ++c) {
      for (std::size_t p = 0; p < c; ++p) {
        double dot = 0.0;
        for (std::size_t r = 0; r < d; ++r) dot += q(r, c) * q(r, p);
        for (std::size_t r = 0; r < d; ++r) q(r, c) -= dot * q(r, p);
      }
      double norm = 0.0;
      for (std::size_t r = 0; r < d; ++r) norm += q(r, c) * q(r, c);
      norm = std::sqrt(norm);
      for (std::size_t r = 0; r < d; ++r) q(r, c) /= norm;
    }
    const Tensor g = testing::random_tensor(n, 1 + rng.below(6), rng);
    orth_err = std::max(orth_err, std::abs(cka(matmul(f, q), g) - cka(f, g)));
    orth_err = std::max(orth_err, std::abs(cka(f, matmul(f, q)) - 1.0));
  }
  for (int k = 0; k < 1000; ++k) {
    const std::size_t n = 3 + rng.below(30);
    const double v = cka(testing::random_tensor(n, 1 + rng.below(8), rng), testing::random_tensor(n, 1 + rng.below(8), rng));
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  return {self_err <= 1e-9 && orth_err <= 1e-6 && lo >= 0.0 && hi <= 1.0 + 1e-9,
          "self_err=" + fmt(self_err) + " orth_err=" + fmt(orth_err) + " range=[" + fmt(lo) + ", " + fmt(hi) + "]"};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "candidate selection equals brute-force enumeration", criterion_eq3},
      {2, "KL / theta suite", criterion_kl},
      {3, "stitch-layer init suite", criterion_stitch_init},
      {4, "probe amortization (one anchor pass per batch)", criterion_amortization},
      {5, "probe and stitch gradients vs central differences", criterion_gradients},
      {6, "desk-scale directional study (5 seeds)", criterion_study},
      {7, "AUC / Pareto suite", criterion_auc},
      {8, "determinism of report CSVs", criterion_determinism},
      {9, "CKA suite", criterion_cka},
  };
  std::set<int> wanted;
  for (int k = 1; k < argc; ++k) wanted.insert(std::atoi(argv[k]));

  int failures = 0;
  for (const auto& c : criteria) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << c.id << ": " << c.name << " | " << o.detail << " | "
              << fmt(seconds_since(t0), 3) << "s" << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
