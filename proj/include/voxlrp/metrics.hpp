#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "voxlrp/dataset.hpp"
#include "voxlrp/lrp.hpp"
#include "voxlrp/volume.hpp"

namespace voxlrp {

// --- classification ------------------------------------------------------------

/// counts[truth][prediction].
struct ConfusionMatrix {
  std::vector<std::string> classes;
  std::vector<std::vector<std::size_t>> counts;

  std::size_t total() const;
};

struct ClassMetrics {
  std::string name;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

struct ClassificationReport {
  std::vector<ClassMetrics> classes;
  double accuracy = 0.0;
  std::size_t total = 0;

  nlohmann::json to_json() const;
  /// Rows "NC(n=..)" with precision, recall and f1 columns.
  std::string to_text() const;
};

std::pair<ConfusionMatrix, ClassificationReport> confusion_and_report(
    std::span<const int> truth, std::span<const int> predicted,
    std::vector<std::string> class_names = {"NC", "MCI/AD"});

/// Probability that a random positive outscores a random negative, ties 1/2.
double roc_auc(std::span<const double> scores, std::span<const int> truth);

struct AucSplits {
  std::optional<double> all;
  std::optional<double> mci_vs_cn;
  std::optional<double> ad_vs_cn;

  nlohmann::json to_json() const;  // absent entries are null
};

/// `all` treats MCI and AD as positive; the sub-splits keep only the two named groups.
AucSplits auc_subsplits(std::span<const double> scores, std::span<const Diagnosis> truth);

// --- overlap and correlation -------------------------------------------------------

double dice(const BinaryMask& x, const BinaryMask& y);

struct CorrelationResult {
  double rho = 0.0;
  std::size_t n = 0;
  std::vector<std::pair<double, double>> pairs;
};

/// Population covariance over population standard deviations.
CorrelationResult pearson(std::span<const double> x, std::span<const double> y);

struct RegionStats {
  double aggregate_relevance = 0.0;
  double volume_ratio = 0.0;
  std::size_t region_voxels = 0;
  std::size_t positive_in_region = 0;
};

RegionStats region_relevance_stats(const RelevanceMap& map, const BinaryMask& region);

/// 61.77% style.
std::string format_percent(double fraction);

std::vector<std::vector<double>> pairwise_dice_matrix(std::span<const BinaryMask> masks);
std::string matrix_to_csv(const std::vector<std::string>& labels, const std::vector<std::vector<double>>& m);

/// Share of the positive relevance that falls inside `region`; 0 without positive relevance.
double positive_mass_fraction(const RelevanceMap& map, const BinaryMask& region);

// --- correlation study -------------------------------------------------------------

struct StudySubject {
  std::string id;
  const Volume3D* model_input = nullptr;  // what the model sees (e.g. residualized)
  const Volume3D* raw = nullptr;          // where the region volume is measured
};

struct StudyResult {
  std::string model_id;
  std::optional<CorrelationResult> correlation;
  std::string error;  // set when the correlation is undefined
  std::vector<std::string> subject_ids;
  std::vector<double> aggregate_relevance;
  std::vector<double> region_volume;

  std::string scatter_csv() const;
};

/// X = summed region relevance for `target_class`, Y = in-region intensity sum.
std::vector<StudyResult> correlation_study(const std::vector<std::pair<std::string, const TrainedModel*>>& models,
                                           std::span<const StudySubject> cohort, const BinaryMask& region,
                                           int target_class, const LrpConfig& config = {});

}  // namespace voxlrp
