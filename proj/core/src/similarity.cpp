#include "stitchlab/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "json_io.hpp"
#include "stitchlab/digest.hpp"
#include "stitchlab/errors.hpp"
#include "stitchlab/linalg.hpp"
#include "stitchlab/parallel.hpp"
#include "stitchlab/rng.hpp"

namespace stitchlab {

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw InvalidInput("kl_divergence: dimension mismatch");
  if (p.empty()) throw InvalidInput("kl_divergence: empty distributions");
  double total = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    total += p[k] * std::log((p[k] + kLogEpsilon) / (q[k] + kLogEpsilon));
  }
  return total;
}

double kl_divergence(const ProbDist& p, const ProbDist& q) { return kl_divergence(p.probs(), q.probs()); }

double mean_kl(const Tensor& p, const Tensor& q) {
  if (!p.same_shape(q)) throw InvalidInput("mean_kl: distribution batches differ in shape");
  if (p.rows() == 0) throw InvalidInput("mean_kl: empty validation set");
  double total = 0.0;
  for (std::size_t r = 0; r < p.rows(); ++r) total += kl_divergence(p.row(r), q.row(r));
  return total / static_cast<double>(p.rows());
}

double theta(const ProbeSet& source_probes, const AnchorModel& source, const ProbeSet& target_probes,
             const AnchorModel& target, std::size_t source_block, std::size_t target_block, const Dataset& val) {
  if (val.size() == 0) throw InvalidInput("theta: empty validation set");
  if (source.stage_of(source_block) != target.stage_of(target_block)) {
    throw InvalidInput("theta: blocks are in different stages");
  }
  return mean_kl(probe_distributions(source_probes, source, source_block, val.inputs),
                 probe_distributions(target_probes, target, target_block, val.inputs));
}

bool SimilarityMatrix::contains(std::size_t source_block, std::size_t target_block) const {
  return std::binary_search(source_blocks.begin(), source_blocks.end(), source_block) &&
         std::binary_search(target_blocks.begin(), target_blocks.end(), target_block);
}

double SimilarityMatrix::at(std::size_t source_block, std::size_t target_block) const {
  const auto si = std::lower_bound(source_blocks.begin(), source_blocks.end(), source_block);
  const auto ti = std::lower_bound(target_blocks.begin(), target_blocks.end(), target_block);
  if (si == source_blocks.end() || *si != source_block || ti == target_blocks.end() || *ti != target_block) {
    throw InvalidInput("SimilarityMatrix: pair (" + std::to_string(source_block) + ", " +
                       std::to_string(target_block) + ") is not in stage " + std::to_string(stage));
  }
  return theta(static_cast<std::size_t>(si - source_blocks.begin()), static_cast<std::size_t>(ti - target_blocks.begin()));
}

double IntraCapacityVector::at(std::size_t block) const {
  if (block < 1 || block > sigma.size() + 1) throw InvalidInput("IntraCapacityVector: block index out of range");
  return block == sigma.size() + 1 ? mean() : sigma[block - 1];
}

double IntraCapacityVector::mean() const {
  if (sigma.empty()) return 0.0;
  return std::accumulate(sigma.begin(), sigma.end(), 0.0) / static_cast<double>(sigma.size());
}

ProbeOutputs compute_probe_outputs(const ProbeSet& probes, const AnchorModel& anchor, const Dataset& data) {
  if (probes.anchor_id != anchor.id()) throw InvalidInput("probe set belongs to a different anchor");
  return {anchor.id(), all_probe_distributions(probes, anchor, data.inputs)};
}

std::vector<SimilarityMatrix> similarity_matrices(const AnchorModel& source, const ProbeSet& source_probes,
                                                  const AnchorModel& target, const ProbeSet& target_probes,
                                                  const Dataset& val, std::size_t threads) {
  if (!(flops(source) < flops(target))) {
    throw InvalidInput("similarity_matrices: source '" + source.id() + "' must have lower FLOPs than target '" +
                       target.id() + "'");
  }
  if (val.size() == 0) throw InvalidInput("similarity_matrices: empty validation set");
  const auto src = compute_probe_outputs(source_probes, source, val);
  const auto tgt = compute_probe_outputs(target_probes, target, val);

  std::vector<SimilarityMatrix> out;
  const std::size_t shared = std::min(source.stages().size(), target.stages().size());
  for (std::size_t s = 0; s < shared; ++s) {
    SimilarityMatrix m;
    m.source_id = source.id();
    m.target_id = target.id();
    m.source_digest = source.weight_digest();
    m.target_digest = target.weight_digest();
    m.stage = s;
    m.sample_count = val.size();
    for (std::size_t i = 1; i <= source.depth(); ++i)
      if (source.stage_of(i) == s) m.source_blocks.push_back(i);
    for (std::size_t j = 1; j <= target.depth(); ++j)
      if (target.stage_of(j) == s) m.target_blocks.push_back(j);
    m.theta = Tensor(m.source_blocks.size(), m.target_blocks.size());
    const std::size_t cols = m.target_blocks.size();
    parallel_for(m.source_blocks.size() * cols, threads, [&](std::size_t k) {
      const std::size_t a = k / cols;
      const std::size_t b = k % cols;
      m.theta(a, b) = mean_kl(src.per_block[m.source_blocks[a] - 1], tgt.per_block[m.target_blocks[b] - 1]);
    });
    out.push_back(std::move(m));
  }
  return out;
}

IntraCapacityVector intra_capacity(const AnchorModel& anchor, const ProbeSet& probes, const Dataset& val) {
  const auto outputs = compute_probe_outputs(probes, anchor, val);
  IntraCapacityVector v;
  v.anchor_id = anchor.id();
  for (std::size_t j = 1; j < anchor.depth(); ++j) v.sigma.push_back(mean_kl(outputs.per_block[j - 1], outputs.per_block[j]));
  return v;
}

double last_block_kl(const AnchorModel& small, const AnchorModel& large, const Dataset& val) {
  if (val.size() == 0) throw InvalidInput("last_block_kl: empty validation set");
  return mean_kl(small.forward(val.inputs), large.forward(val.inputs));
}

std::string to_string(MetricKind kind) {
  switch (kind) {
    case MetricKind::kMse: return "mse";
    case MetricKind::kCe: return "ce";
    case MetricKind::kCka: return "cka";
    case MetricKind::kDm: return "dm";
  }
  return "unknown";
}

double mse_metric(const Tensor& f, const Tensor& g) {
  if (!f.same_shape(g)) throw InvalidInput("mse: activation dimensions differ");
  if (f.rows() == 0) throw InvalidInput("mse: empty batch");
  double total = 0.0;
  auto a = f.values();
  auto b = g.values();
  for (std::size_t k = 0; k < a.size(); ++k) total += (a[k] - b[k]) * (a[k] - b[k]);
  return total / static_cast<double>(f.rows());
}

double ce_metric(const Tensor& source_probs, std::span<const std::size_t> labels) {
  if (labels.size() != source_probs.rows()) throw InvalidInput("ce: labels required for every row");
  double total = 0.0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] >= source_probs.cols()) throw InvalidInput("ce: label out of range");
    total -= std::log(source_probs(r, labels[r]) + kLogEpsilon);
  }
  return total;
}

double dm_metric(const Tensor& f, const Tensor& g, double ridge) {
  const AffineMap map = fit_affine_least_squares(f, g, ridge);
  return affine_residual(map, f, g);
}

namespace {

Tensor center_columns(const Tensor& t) {
  Tensor out = t;
  for (std::size_t c = 0; c < t.cols(); ++c) {
    double mean = 0.0;
    for (std::size_t r = 0; r < t.rows(); ++r) mean += t(r, c);
    mean /= static_cast<double>(t.rows());
    for (std::size_t r = 0; r < t.rows(); ++r) out(r, c) -= mean;
  }
  return out;
}

double frobenius_sq(const Tensor& t) {
  double total = 0.0;
  for (double v : t.values()) total += v * v;
  return total;
}

}  // namespace

double cka(const Tensor& f, const Tensor& g) {
  if (f.rows() != g.rows()) throw InvalidInput("cka: row-count mismatch");
  if (f.rows() < 2) throw InvalidInput("cka: at least two samples are required");
  const Tensor fc = center_columns(f);
  const Tensor gc = center_columns(g);
  const double cross = frobenius_sq(matmul_tn(fc, gc));
  const double self_f = std::sqrt(frobenius_sq(matmul_tn(fc, fc)));
  const double self_g = std::sqrt(frobenius_sq(matmul_tn(gc, gc)));
  if (!(self_f > 0.0) || !(self_g > 0.0)) throw NumericError("cka: features have zero variance");
  return cross / (self_f * self_g);
}

double class_conditional_cka(const Tensor& f, const Tensor& g, std::span<const std::size_t> labels) {
  if (f.rows() != g.rows() || labels.size() != f.rows()) throw InvalidInput("class_conditional_cka: row-count mismatch");
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t r = 0; r < labels.size(); ++r) by_class[labels[r]].push_back(r);
  double total = 0.0;
  std::size_t used = 0;
  for (const auto& [label, rows] : by_class) {
    if (rows.size() < 2) continue;
    try {
      total += cka(f.gather_rows(rows), g.gather_rows(rows));
      ++used;
    } catch (const NumericError&) {
      // Constant features inside one class carry no alignment signal.
    }
  }
  if (used == 0) throw InvalidInput("class_conditional_cka: no class has two or more usable samples");
  return total / static_cast<double>(used);
}

double baseline_metric(MetricKind kind, const Tensor& f, const Tensor& g, std::span<const std::size_t> labels) {
  switch (kind) {
    case MetricKind::kMse: return mse_metric(f, g);
    case MetricKind::kCe: return ce_metric(f, labels);
    case MetricKind::kCka: return cka(f, g);
    case MetricKind::kDm: return dm_metric(f, g);
  }
  throw InvalidInput("baseline_metric: unknown kind");
}

Dataset shuffle_labels(const Dataset& data, std::uint64_t seed) {
  Dataset out = data;
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(out.labels));
  return out;
}

void export_heatmap(const SimilarityMatrix& matrix, const std::filesystem::path& path) {
  if (matrix.theta.empty()) throw InvalidInput("export_heatmap: empty matrix");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << std::setprecision(17) << "source\\target";
  for (auto j : matrix.target_blocks) out << ',' << j;
  out << '\n';
  for (std::size_t a = 0; a < matrix.source_blocks.size(); ++a) {
    out << matrix.source_blocks[a];
    for (std::size_t b = 0; b < matrix.target_blocks.size(); ++b) out << ',' << matrix.theta(a, b);
    out << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

Heatmap read_heatmap(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  Heatmap h;
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": missing header row");
  {
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    while (std::getline(ss, cell, ',')) h.target_blocks.push_back(std::stoul(cell));
  }
  std::vector<double> values;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    h.source_blocks.push_back(std::stoul(cell));
    std::size_t cols = 0;
    while (std::getline(ss, cell, ',')) {
      values.push_back(std::stod(cell));
      ++cols;
    }
    if (cols != h.target_blocks.size()) throw FormatError(path.string() + ": ragged row");
  }
  if (h.source_blocks.empty() || h.target_blocks.empty()) throw FormatError(path.string() + ": empty heatmap");
  h.values = Tensor(h.source_blocks.size(), h.target_blocks.size(), std::move(values));
  return h;
}

void save_similarity(const std::vector<SimilarityMatrix>& matrices, const IntraCapacityVector& sigma,
                     double last_block, const std::filesystem::path& path) {
  using detail::json;
  json jm = json::array();
  for (const auto& m : matrices) {
    jm.push_back({{"source_id", m.source_id},
                  {"target_id", m.target_id},
                  {"source_digest", to_hex(m.source_digest)},
                  {"target_digest", to_hex(m.target_digest)},
                  {"stage", m.stage},
                  {"source_blocks", m.source_blocks},
                  {"target_blocks", m.target_blocks},
                  {"sample_count", m.sample_count},
                  {"theta", detail::tensor_to_json(m.theta)}});
  }
  const json doc{{"format", "stitchlab.similarity"},
                 {"version", 1},
                 {"kl", {{"direction", "source_as_p"}, {"log", "natural"}, {"epsilon", kLogEpsilon}}},
                 {"matrices", jm},
                 {"sigma", {{"anchor_id", sigma.anchor_id}, {"values", sigma.sigma}}},
                 {"last_block_kl", last_block}};
  detail::write_json_file(doc, path);
}

SimilarityBundle load_similarity(const std::filesystem::path& path) {
  using detail::field;
  const auto doc = detail::read_json_file(path);
  detail::require_format(doc, "stitchlab.similarity", 1, path);
  SimilarityBundle b;
  try {
    for (const auto& jm : field(doc, "matrices")) {
      SimilarityMatrix m;
      m.source_id = field(jm, "source_id").get<std::string>();
      m.target_id = field(jm, "target_id").get<std::string>();
      m.source_digest = std::stoull(field(jm, "source_digest").get<std::string>(), nullptr, 16);
      m.target_digest = std::stoull(field(jm, "target_digest").get<std::string>(), nullptr, 16);
      m.stage = field(jm, "stage").get<std::size_t>();
      m.source_blocks = field(jm, "source_blocks").get<std::vector<std::size_t>>();
      m.target_blocks = field(jm, "target_blocks").get<std::vector<std::size_t>>();
      m.sample_count = field(jm, "sample_count").get<std::size_t>();
      m.theta = detail::tensor_from_json(field(jm, "theta"), "theta");
      b.matrices.push_back(std::move(m));
    }
    const auto& js = field(doc, "sigma");
    b.sigma.anchor_id = field(js, "anchor_id").get<std::string>();
    b.sigma.sigma = field(js, "values").get<std::vector<double>>();
    b.last_block_kl = field(doc, "last_block_kl").get<double>();
  } catch (const detail::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return b;
}

}  // namespace stitchlab
