#include "stitchlab/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "json_io.hpp"
#include "stitchlab/errors.hpp"

namespace stitchlab {

std::string format_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

std::vector<ParetoPoint> pareto_front(std::span<const ParetoPoint> points) {
  std::vector<ParetoPoint> sorted(points.begin(), points.end());
  // Cheapest first; among equal FLOPs the most accurate first.
  std::stable_sort(sorted.begin(), sorted.end(), [](const ParetoPoint& a, const ParetoPoint& b) {
    if (a.flops != b.flops) return a.flops < b.flops;
    return a.accuracy > b.accuracy;
  });
  std::vector<ParetoPoint> front;
  for (const auto& p : sorted) {
    // Everything already kept has ≤ FLOPs; p survives only with strictly higher accuracy.
    if (front.empty() || p.accuracy > front.back().accuracy) front.push_back(p);
  }
  return front;
}

double auc(std::span<const ParetoPoint> points, double flops_lo, double flops_hi) {
  if (points.size() < 2) throw InvalidInput("auc: at least two points are required");
  if (!(flops_lo < flops_hi)) throw InvalidInput("auc: flops_lo must be < flops_hi");
  const auto front = pareto_front(points);
  const double span = flops_hi - flops_lo;
  std::vector<double> xs;
  std::vector<double> ys;
  for (const auto& p : front) {
    xs.push_back((p.flops - flops_lo) / span);
    ys.push_back(p.accuracy);
  }
  // Piecewise-linear curve through the front, constant outside [xs.front(), xs.back()].
  const auto curve = [&](double x) {
    if (x <= xs.front()) return ys.front();
    if (x >= xs.back()) return ys.back();
    const auto it = std::upper_bound(xs.begin(), xs.end(), x);
    const std::size_t k = static_cast<std::size_t>(it - xs.begin());
    const double t = (x - xs[k - 1]) / (xs[k] - xs[k - 1]);
    return ys[k - 1] + t * (ys[k] - ys[k - 1]);
  };
  std::vector<double> knots{0.0, 1.0};
  for (double x : xs)
    if (x > 0.0 && x < 1.0) knots.push_back(x);
  std::sort(knots.begin(), knots.end());
  double area = 0.0;
  for (std::size_t k = 1; k < knots.size(); ++k) {
    area += 0.5 * (curve(knots[k - 1]) + curve(knots[k])) * (knots[k] - knots[k - 1]);
  }
  return area;
}

CurveSummary summarize_curve(std::string method, std::vector<ParetoPoint> points, double flops_lo, double flops_hi) {
  CurveSummary s;
  s.method = std::move(method);
  s.front = pareto_front(points);
  s.auc = auc(points, flops_lo, flops_hi);
  s.points = std::move(points);
  s.flops_lo = flops_lo;
  s.flops_hi = flops_hi;
  return s;
}

std::pair<double, double> common_flops_bounds(std::span<const std::vector<ParetoPoint>> curves) {
  double lo = INFINITY;
  double hi = -INFINITY;
  for (const auto& c : curves) {
    for (const auto& p : c) {
      lo = std::min(lo, p.flops);
      hi = std::max(hi, p.flops);
    }
  }
  if (!(lo < hi)) throw InvalidInput("common_flops_bounds: need at least two distinct FLOPs values");
  return {lo, hi};
}

double overlap(std::span<const StitchConfig> selected, std::span<const StitchConfig> reference) {
  if (reference.empty()) throw InvalidInput("overlap: empty reference set");
  std::set<std::string> a;
  for (const auto& c : selected) a.insert(c.key());
  std::set<std::string> b;
  for (const auto& c : reference) b.insert(c.key());
  std::size_t common = 0;
  for (const auto& k : b) common += a.count(k);
  return 100.0 * static_cast<double>(common) / static_cast<double>(b.size());
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InvalidInput("pearson: length mismatch");
  if (x.size() < 3) throw InvalidInput("pearson: at least three samples are required");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    sxy += (x[k] - mx) * (y[k] - my);
    sxx += (x[k] - mx) * (x[k] - mx);
    syy += (y[k] - my) * (y[k] - my);
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw NumericError("correlation undefined: zero variance input");
  return sxy / std::sqrt(sxx * syy);
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t start = 0; start < order.size();) {
    std::size_t end = start + 1;
    while (end < order.size() && values[order[end]] == values[order[start]]) ++end;
    const double rank = 0.5 * static_cast<double>(start + 1 + end);  // mean of ranks start+1..end
    for (std::size_t k = start; k < end; ++k) ranks[order[k]] = rank;
    start = end;
  }
  return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InvalidInput("spearman: length mismatch");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry);
}

std::vector<Correlation> correlation_study(const std::map<std::string, std::vector<double>>& metric_scores,
                                           std::span<const double> stitched_accuracies, double target_accuracy) {
  std::vector<double> drop(stitched_accuracies.size());
  for (std::size_t k = 0; k < drop.size(); ++k) drop[k] = target_accuracy - stitched_accuracies[k];
  std::vector<Correlation> out;
  for (const auto& [name, scores] : metric_scores) {
    if (scores.size() != drop.size()) throw InvalidInput("correlation_study: metric '" + name + "' has wrong length");
    Correlation c{name, std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN(), drop.size()};
    try {
      c.pearson = pearson(scores, drop);
      c.spearman = spearman(scores, drop);
    } catch (const NumericError&) {
    }
    out.push_back(c);
  }
  return out;
}

namespace {

std::ofstream open_csv(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

void finish(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

void write_report(const ReportInputs& inputs, const std::filesystem::path& dir) {
  if (inputs.curves.empty()) throw InvalidInput("write_report: no curves to report");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  {
    const auto path = dir / "pareto.csv";
    auto out = open_csv(path);
    out << "method,config,flops,accuracy,on_front\n";
    for (const auto& c : inputs.curves) {
      std::set<std::string> on_front;
      for (const auto& p : c.front) on_front.insert(p.config_id);
      for (const auto& p : c.points) {
        out << c.method << ',' << p.config_id << ',' << format_double(p.flops) << ',' << format_double(p.accuracy) << ','
            << (on_front.count(p.config_id) ? 1 : 0) << '\n';
      }
    }
    finish(out, path);
  }
  {
    detail::json curves = detail::json::array();
    for (const auto& c : inputs.curves) {
      curves.push_back({{"method", c.method},
                        {"auc", c.auc},
                        {"flops_lo", c.flops_lo},
                        {"flops_hi", c.flops_hi},
                        {"num_points", c.points.size()},
                        {"num_front", c.front.size()}});
    }
    detail::json deltas = detail::json::array();
    for (const auto& a : inputs.curves) {
      for (const auto& b : inputs.curves) {
        if (&a == &b) continue;
        deltas.push_back({{"method", a.method}, {"baseline", b.method}, {"delta_auc", a.auc - b.auc}});
      }
    }
    detail::json meta = inputs.metadata;
    meta["auc_integrates"] = "pareto_front";
    meta["auc_extension"] = "constant";
    detail::write_json_file(
        {{"format", "stitchlab.auc"}, {"version", 1}, {"curves", curves}, {"delta_auc", deltas}, {"metadata", meta}},
        dir / "auc.json");
  }
  {
    const auto path = dir / "correlations.csv";
    auto out = open_csv(path);
    out << "metric,pearson,spearman,count\n";
    for (const auto& c : inputs.correlations) {
      out << c.metric << ',' << format_double(c.pearson) << ',' << format_double(c.spearman) << ',' << c.count << '\n';
    }
    finish(out, path);
  }
  {
    const auto path = dir / "overlap.csv";
    auto out = open_csv(path);
    out << "selected,reference,percent\n";
    for (const auto& o : inputs.overlaps) out << o.selected << ',' << o.reference << ',' << format_double(o.percent) << '\n';
    finish(out, path);
  }
  {
    const auto path = dir / "curves.csv";
    auto out = open_csv(path);
    out << "method,x,y\n";
    for (const auto& c : inputs.curves) {
      for (const auto& p : c.front) {
        out << c.method << ',' << format_double((p.flops - c.flops_lo) / (c.flops_hi - c.flops_lo)) << ','
            << format_double(p.accuracy) << '\n';
      }
    }
    finish(out, path);
  }
}

std::map<std::string, std::vector<ParetoPoint>> read_pareto_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "method,config,flops,accuracy,on_front") {
    throw FormatError(path.string() + ": unexpected header");
  }
  std::map<std::string, std::vector<ParetoPoint>> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string method, config, f, a, front;
    if (!std::getline(ss, method, ',') || !std::getline(ss, config, ',') || !std::getline(ss, f, ',') ||
        !std::getline(ss, a, ',') || !std::getline(ss, front, ',')) {
      throw FormatError(path.string() + ": malformed row");
    }
    out[method].push_back({config, std::stod(f), std::stod(a)});
  }
  return out;
}

}  // namespace stitchlab
