#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "voxlrp/dataset.hpp"
#include "voxlrp/metrics.hpp"
#include "voxlrp/model.hpp"
#include "voxlrp/preprocess.hpp"

namespace voxlrp {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 8;
  double lr0 = 0.001;
  double decay = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 1;
  int augmentation_level = 7;
  bool residualize = true;

  void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& c);

/// lr0 / (1 + decay * iteration); iterations count optimizer steps.
double lr_at(std::uint64_t iteration, double lr0, double decay);

template <typename T>
struct AdamState {
  std::vector<std::vector<double>> m, v;
  std::uint64_t t = 0;
};

/// One bias-corrected Adam update. Empty state is sized on first use.
template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads,
               AdamState<T>& state, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

struct EpochStats {
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainLog {
  std::vector<EpochStats> epochs;
  std::vector<double> lr_trace;  // one entry per optimizer step
  std::size_t degenerate_bn_steps = 0;

  nlohmann::json to_json() const;
};

/// Observers for instrumentation; every forward pass reports its phase
/// ("train" or "validate") and mode.
struct TrainHooks {
  std::function<void(const std::string& phase, Mode mode, bool dropout_active)> on_forward;
  std::function<void(int epoch, const EpochStats&)> on_epoch;
};

struct FoldResult {
  TrainedModel model;
  TrainLog log;
  std::vector<double> val_scores;  // softmax probability of class 1 after the last epoch
  std::vector<int> val_predictions;
};

/// `volumes` is indexed by AugmentedSample::subject and by `val`.
FoldResult train_fold(const ModelSpec& spec, std::span<const Volume3D> volumes,
                      std::span<const AugmentedSample> train, std::span<const std::size_t> val,
                      std::span<const int> val_labels, const TrainConfig& config, const TrainHooks& hooks = {});

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;  // population
};

MeanSd mean_sd(std::span<const double> v);

struct FoldOutcome {
  std::size_t fold = 0;
  std::string model_id;
  FoldResult result;
  std::optional<ResidualModel> residual;
  std::vector<std::string> val_ids;
  std::vector<int> val_truth;
  std::vector<Diagnosis> val_diagnosis;
  double final_accuracy = 0.0;
  AucSplits auc;
};

struct CvReport {
  std::vector<FoldOutcome> folds;
  MeanSd accuracy;
  std::vector<MeanSd> val_accuracy_curve, val_loss_curve, train_loss_curve;
  AucSplits pooled_auc;  // over all validation predictions
  std::string best_model_id;

  nlohmann::json to_json() const;
  /// epoch,mean,sd for one of "val_accuracy", "val_loss", "train_loss".
  std::string curve_csv(const std::string& which) const;
};

struct CvOptions {
  std::size_t threads = 1;
  std::optional<std::filesystem::path> out_dir;  // persists fold-XX/{model.voxm,residual.voxw,log.json}
};

CvReport run_cv(const ModelSpec& spec, const DatasetManifest& manifest, const FoldSplit& folds,
                const TrainConfig& config, const CvOptions& options = {});

std::string fold_model_id(std::size_t fold);

}  // namespace voxlrp
