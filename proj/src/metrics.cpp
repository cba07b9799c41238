#include "voxlrp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "voxlrp/error.hpp"

namespace voxlrp {

using nlohmann::json;

std::size_t ConfusionMatrix::total() const {
  std::size_t t = 0;
  for (const auto& row : counts) t = std::accumulate(row.begin(), row.end(), t);
  return t;
}

json ClassificationReport::to_json() const {
  json cls = json::array();
  for (const auto& c : classes) {
    cls.push_back({{"class", c.name}, {"precision", c.precision}, {"recall", c.recall}, {"f1", c.f1},
                   {"support", c.support}});
  }
  return json{{"classes", cls}, {"accuracy", accuracy}, {"total", total}};
}

std::string ClassificationReport::to_text() const {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-16s %9s %9s %9s\n", "", "precision", "recall", "f1-score");
  os << line;
  for (const auto& c : classes) {
    const std::string label = c.name + "(n=" + std::to_string(c.support) + ")";
    std::snprintf(line, sizeof line, "%-16s %9.2f %9.2f %9.2f\n", label.c_str(), c.precision, c.recall, c.f1);
    os << line;
  }
  std::snprintf(line, sizeof line, "%-16s %29.2f\n", "accuracy", accuracy);
  os << line;
  return os.str();
}

std::pair<ConfusionMatrix, ClassificationReport> confusion_and_report(std::span<const int> truth,
                                                                      std::span<const int> predicted,
                                                                      std::vector<std::string> class_names) {
  require(!truth.empty(), ErrorCode::InvalidArgument, "confusion_and_report: empty input");
  require(truth.size() == predicted.size(), ErrorCode::InvalidArgument,
          "confusion_and_report: truth and predictions differ in length");
  const std::size_t K = class_names.size();
  ConfusionMatrix cm{class_names, std::vector<std::vector<std::size_t>>(K, std::vector<std::size_t>(K, 0))};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    require(truth[i] >= 0 && static_cast<std::size_t>(truth[i]) < K && predicted[i] >= 0 &&
                static_cast<std::size_t>(predicted[i]) < K,
            ErrorCode::InvalidArgument, "confusion_and_report: label outside the class set");
    ++cm.counts[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(predicted[i])];
  }
  ClassificationReport rep;
  rep.total = truth.size();
  std::size_t diag = 0;
  for (std::size_t k = 0; k < K; ++k) {
    std::size_t col = 0, row = 0;
    for (std::size_t j = 0; j < K; ++j) {
      col += cm.counts[j][k];
      row += cm.counts[k][j];
    }
    const double tp = static_cast<double>(cm.counts[k][k]);
    diag += cm.counts[k][k];
    ClassMetrics m;
    m.name = class_names[k];
    m.support = row;
    m.precision = col ? tp / static_cast<double>(col) : 0.0;
    m.recall = row ? tp / static_cast<double>(row) : 0.0;
    m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    rep.classes.push_back(m);
  }
  rep.accuracy = static_cast<double>(diag) / static_cast<double>(rep.total);
  return {cm, rep};
}

double roc_auc(std::span<const double> scores, std::span<const int> truth) {
  require(scores.size() == truth.size(), ErrorCode::InvalidArgument, "roc_auc: scores and truth differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Mann-Whitney with mid-ranks; doubled ranks keep everything integral.
  double pos_rank2 = 0.0;
  std::size_t n_pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid2 = static_cast<double>(i + 1 + j);  // twice the mean rank of positions i+1..j
    for (std::size_t k = i; k < j; ++k) {
      if (truth[order[k]] != 0) {
        pos_rank2 += mid2;
        ++n_pos;
      }
    }
    i = j;
  }
  const std::size_t n_neg = n - n_pos;
  require(n_pos > 0 && n_neg > 0, ErrorCode::Precondition, "roc_auc: both classes must be present");
  const double np = static_cast<double>(n_pos);
  const double u2 = pos_rank2 - np * (np + 1.0);
  return u2 / (2.0 * np * static_cast<double>(n_neg));
}

json AucSplits::to_json() const {
  auto v = [](const std::optional<double>& o) { return o ? json(*o) : json(nullptr); };
  return json{{"all", v(all)}, {"mci_vs_cn", v(mci_vs_cn)}, {"ad_vs_cn", v(ad_vs_cn)}};
}

AucSplits auc_subsplits(std::span<const double> scores, std::span<const Diagnosis> truth) {
  require(scores.size() == truth.size(), ErrorCode::InvalidArgument, "auc_subsplits: length mismatch");
  auto subset = [&](auto keep) -> std::optional<double> {
    std::vector<double> s;
    std::vector<int> t;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (!keep(truth[i])) continue;
      s.push_back(scores[i]);
      t.push_back(binary_label(truth[i]));
    }
    const auto pos = std::count(t.begin(), t.end(), 1);
    if (pos == 0 || pos == static_cast<long>(t.size())) return std::nullopt;
    return roc_auc(s, t);
  };
  AucSplits r;
  r.all = subset([](Diagnosis) { return true; });
  r.mci_vs_cn = subset([](Diagnosis d) { return d != Diagnosis::AD; });
  r.ad_vs_cn = subset([](Diagnosis d) { return d != Diagnosis::MCI; });
  return r;
}

double dice(const BinaryMask& x, const BinaryMask& y) {
  require(x.dims() == y.dims(), ErrorCode::DimMismatch, "dice: mask dims differ");
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    a += x[i];
    b += y[i];
    both += x[i] && y[i];
  }
  require(a + b > 0, ErrorCode::Undefined, "dice: both masks are empty");
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

CorrelationResult pearson(std::span<const double> x, std::span<const double> y) {
  require(x.size() == y.size(), ErrorCode::InvalidArgument, "pearson: length mismatch");
  require(x.size() >= 2, ErrorCode::Precondition, "pearson: need at least 2 samples");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  require(sxx > 0.0 && syy > 0.0, ErrorCode::Undefined, "pearson: zero variance, correlation undefined");
  CorrelationResult r;
  r.n = x.size();
  r.rho = std::clamp((sxy / n) / (std::sqrt(sxx / n) * std::sqrt(syy / n)), -1.0, 1.0);
  for (std::size_t i = 0; i < x.size(); ++i) r.pairs.emplace_back(x[i], y[i]);
  return r;
}

RegionStats region_relevance_stats(const RelevanceMap& map, const BinaryMask& region) {
  require(map.dims == region.dims(), ErrorCode::DimMismatch, "region_relevance_stats: dims differ");
  RegionStats s;
  s.region_voxels = region.count();
  require(s.region_voxels > 0, ErrorCode::InvalidArgument, "region_relevance_stats: empty region");
  for (std::size_t i = 0; i < region.size(); ++i) {
    if (!region[i]) continue;
    s.aggregate_relevance += map.values[i];
    s.positive_in_region += map.values[i] > 0.0;
  }
  s.volume_ratio = static_cast<double>(s.positive_in_region) / static_cast<double>(s.region_voxels);
  return s;
}

std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f%%", fraction * 100.0);
  return buf;
}

std::vector<std::vector<double>> pairwise_dice_matrix(std::span<const BinaryMask> masks) {
  require(masks.size() >= 2, ErrorCode::InvalidArgument, "pairwise_dice_matrix: need at least 2 masks");
  const std::size_t n = masks.size();
  std::vector<std::vector<double>> m(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) m[i][j] = m[j][i] = dice(masks[i], masks[j]);
  return m;
}

std::string matrix_to_csv(const std::vector<std::string>& labels, const std::vector<std::vector<double>>& m) {
  std::ostringstream os;
  os.precision(17);
  os << "model";
  for (const auto& l : labels) os << "," << l;
  os << "\n";
  for (std::size_t i = 0; i < m.size(); ++i) {
    os << labels[i];
    for (double v : m[i]) os << "," << v;
    os << "\n";
  }
  return os.str();
}

double positive_mass_fraction(const RelevanceMap& map, const BinaryMask& region) {
  require(map.dims == region.dims(), ErrorCode::DimMismatch, "positive_mass_fraction: dims differ");
  double inside = 0.0, all = 0.0;
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    const double v = map.values[i];
    if (v <= 0.0) continue;
    all += v;
    if (region[i]) inside += v;
  }
  return all > 0.0 ? inside / all : 0.0;
}

std::string StudyResult::scatter_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "subject,aggregate_relevance,region_volume\n";
  for (std::size_t i = 0; i < subject_ids.size(); ++i) {
    os << subject_ids[i] << "," << aggregate_relevance[i] << "," << region_volume[i] << "\n";
  }
  return os.str();
}

std::vector<StudyResult> correlation_study(const std::vector<std::pair<std::string, const TrainedModel*>>& models,
                                           std::span<const StudySubject> cohort, const BinaryMask& region,
                                           int target_class, const LrpConfig& config) {
  std::vector<StudyResult> out;
  for (const auto& [id, model] : models) {
    StudyResult r;
    r.model_id = id;
    const TrainedModel canonical = canonicalize(*model);
    for (const auto& s : cohort) {
      const RelevanceMap map = lrp_relevance(canonical, *s.model_input, target_class, config);
      r.subject_ids.push_back(s.id);
      r.aggregate_relevance.push_back(region_relevance_stats(map, region).aggregate_relevance);
      r.region_volume.push_back(region_intensity_sum(*s.raw, region));
    }
    try {
      r.correlation = pearson(r.aggregate_relevance, r.region_volume);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::Undefined && e.code() != ErrorCode::Precondition) throw;
      r.error = e.what();
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace voxlrp
