#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "stitchlab/selection.hpp"

namespace stitchlab {

struct ParetoPoint {
  std::string config_id;
  double flops = 0.0;
  double accuracy = 0.0;
};

/// Points not dominated by another point with ≤ FLOPs and ≥ accuracy (one
/// strict). Exact duplicates collapse to the first occurrence. Sorted by FLOPs.
std::vector<ParetoPoint> pareto_front(std::span<const ParetoPoint> points);

/// Area under accuracy vs normalized FLOPs x = (FLOPs − lo)/(hi − lo) over
/// x ∈ [0, 1]. Integrates the Pareto front piecewise-linearly, extending the
/// first and last accuracies as constants out to the interval ends.
double auc(std::span<const ParetoPoint> points, double flops_lo, double flops_hi);

struct CurveSummary {
  std::string method;
  std::vector<ParetoPoint> points;
  std::vector<ParetoPoint> front;
  double auc = 0.0;
  double flops_lo = 0.0;
  double flops_hi = 0.0;
};

CurveSummary summarize_curve(std::string method, std::vector<ParetoPoint> points, double flops_lo, double flops_hi);

/// Global FLOPs range over every point of every curve.
std::pair<double, double> common_flops_bounds(std::span<const std::vector<ParetoPoint>> curves);

/// 100·|A ∩ B| / |B|.
double overlap(std::span<const StitchConfig> selected, std::span<const StitchConfig> reference);

double pearson(std::span<const double> x, std::span<const double> y);
/// Average ranks for ties, 1-based.
std::vector<double> average_ranks(std::span<const double> values);
double spearman(std::span<const double> x, std::span<const double> y);

struct Correlation {
  std::string metric;
  double pearson = 0.0;
  double spearman = 0.0;
  std::size_t count = 0;
};

/// Correlates each metric's per-config score with ΔAcc = target accuracy − stitched accuracy.
/// Throws NumericError when a metric or ΔAcc has zero variance.
/// Undefined coefficients (constant scores or accuracies) are reported as NaN.
std::vector<Correlation> correlation_study(const std::map<std::string, std::vector<double>>& metric_scores,
                                           std::span<const double> stitched_accuracies, double target_accuracy);

struct OverlapRow {
  std::string selected;
  std::string reference;
  double percent = 0.0;
};

struct ReportInputs {
  std::vector<CurveSummary> curves;
  std::vector<Correlation> correlations;
  std::vector<OverlapRow> overlaps;
  std::map<std::string, std::string> metadata;
};

/// Writes pareto.csv, auc.json, correlations.csv, overlap.csv and curves.csv into `dir`.
void write_report(const ReportInputs& inputs, const std::filesystem::path& dir);

/// Reads pareto.csv back as method → points.
std::map<std::string, std::vector<ParetoPoint>> read_pareto_csv(const std::filesystem::path& path);

/// Formats a double with 17 significant digits (round-trip exact).
std::string format_double(double v);

}  // namespace stitchlab
