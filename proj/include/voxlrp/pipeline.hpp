#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "voxlrp/dataset.hpp"
#include "voxlrp/lrp.hpp"
#include "voxlrp/model.hpp"
#include "voxlrp/trainer.hpp"

namespace voxlrp {

// Config file layout (every section and key optional, unknown keys rejected):
//   {
//     "paths":   {"manifest": "", "out": "voxlrp-run"},
//     "synth":   {"n_subjects": 200, "dims": [32,32,32], "seed": 1, "noise_sigma": 0.05},
//     "split":   {"folds": 10, "seed": 1},
//     "model":   {ModelSpec keys; input_dims defaults to the cohort dims},
//     "train":   {TrainConfig keys, "threads": 0 (= all cores), "holdout_fold": 0},
//     "lrp":     {"alpha", "beta", "epsilon", "seed_scale", "models": ["best","fold-00"],
//                 "subjects": [] (= all), "target_class": 1, "min_cluster": [2,8,32]},
//     "metrics": {"region": "hippocampus"},
//     "serve":   {"host": "127.0.0.1", "port": 8080}
//   }
// An empty paths.manifest means <out>/cohort/manifest.json.

struct SynthConfig {
  std::size_t n_subjects = 200;
  Dims dims{32, 32, 32};
  std::uint64_t seed = 1;
  double noise_sigma = 0.05;
};

struct SplitConfig {
  std::size_t folds = 10;
  std::uint64_t seed = 1;
};

struct TrainSection {
  TrainConfig train;
  std::size_t threads = 0;
  std::size_t holdout_fold = 0;
};

struct ExplainConfig {
  LrpConfig lrp;
  std::vector<std::string> models{"best", "fold-00"};
  std::vector<std::string> subjects;
  int target_class = 1;
  std::vector<std::size_t> min_cluster{2, 8, 32};
};

struct MetricsConfig {
  std::string region = "hippocampus";
};

struct ServeConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
};

struct PipelineConfig {
  std::string manifest;
  std::filesystem::path out = "voxlrp-run";
  SynthConfig synth;
  SplitConfig split;
  nlohmann::json model = nlohmann::json::object();  // ModelSpec overrides
  TrainSection train;
  ExplainConfig explain;
  MetricsConfig metrics;
  ServeConfig serve;

  std::filesystem::path manifest_path() const;
  /// The model spec with input_dims filled from `dims` unless set explicitly.
  ModelSpec model_spec(const Dims& dims) const;
  std::size_t thread_count() const;
  /// Overrides the synth, split and train seeds.
  void set_seed(std::uint64_t seed);
};

PipelineConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const PipelineConfig& c);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

// Each stage writes under config.out and returns a short JSON summary.
// Outputs:
//   synth        cohort/ (manifest, volumes, masks)
//   residualize  residual/{model.voxw, volumes/<id>.voxw}
//   split        split/split.json
//   train        train/{model.voxm, residual.voxw, log.json, report.json}
//   cv           cv/{report.json, predictions.json, curve_*.csv, fold-XX/...}
//   explain      explain/{index.json, <model>/<id>.voxw[.json], <model>/<id>.c<k>.voxw, <model>/predictions.json}
//   metrics      metrics/{summary.json, classification_report.*, confusion.csv, auc.json,
//                         dice_matrix.csv, correlation_<model>.csv, region_stats.json, parameters.*}
// Each stage also writes the resolved config as <stage dir>/config.json.
nlohmann::json run_synth(const PipelineConfig& c);
nlohmann::json run_residualize(const PipelineConfig& c);
nlohmann::json run_split(const PipelineConfig& c);
nlohmann::json run_train(const PipelineConfig& c);
nlohmann::json run_cv_stage(const PipelineConfig& c);
nlohmann::json run_explain(const PipelineConfig& c);
nlohmann::json run_metrics(const PipelineConfig& c);

/// Path of a relevance map (min_cluster 0 = unfiltered).
std::filesystem::path relevance_path(const std::filesystem::path& out, const std::string& model,
                                     const std::string& subject, std::size_t min_cluster = 0);

/// Map values kept only inside positive clusters of at least `min_size` voxels.
std::vector<double> cluster_filtered(const RelevanceMap& map, std::size_t min_size);

// --- parameter grid ----------------------------------------------------------------

struct GridEntry {
  std::string name;
  ModelSpec spec;
};

/// The twelve architecture variants of the tuning study, on the 89x32x94 sub-volume by default.
std::vector<GridEntry> experiment_grid(const Dims& dims = {89, 32, 94});

struct PaperCount {
  std::string name;
  ModelSpec spec;
  std::string published;
  ParameterCount computed;
};

PaperCount paper_count(std::string name, ModelSpec spec, std::string published);
/// Sub-volume 89x32x94 and whole-brain 89x111x94 counts next to the published figures.
std::vector<PaperCount> paper_parameter_counts();
std::string parameter_report_text(const std::vector<GridEntry>& grid, const std::vector<PaperCount>& paper);

}  // namespace voxlrp
