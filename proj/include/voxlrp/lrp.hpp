#pragma once

// Alpha-beta relevance propagation and relevance-map post-processing.
//
// Per linear layer, with z+_j = sum_i (x_i w_ij)+ and z-_j = sum_i (x_i w_ij)-:
//   R_i = sum_j (alpha (x_i w_ij)+ / z+_j - beta (x_i w_ij)- / z-_j) R_j
// Biases never enter the denominators. A neuron j keeps the fraction
// alpha z+_j/z+_j' - beta z-_j/z-_j' of R_j, where z' is the stabilized
// denominator; the rest is reported as absorbed.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "voxlrp/model.hpp"
#include "voxlrp/volume.hpp"

namespace voxlrp {

struct LrpConfig {
  double alpha = 1.0;
  double beta = 0.0;
  double epsilon = 1e-9;     // |denominator| < epsilon becomes epsilon * sign, sign(0) = +1
  double seed_scale = 1.0;   // the output neuron starts with seed_scale * logit

  void validate() const;
};

struct LayerRelevance {
  std::string layer;
  double upper = 0.0;     // sum of relevance entering the layer from above
  double lower = 0.0;     // sum handed to the layer below
  double absorbed = 0.0;  // upper - lower as accounted per neuron
};

struct RelevanceMap {
  std::string subject_id;
  std::string model_id;
  int target_class = 0;
  double logit = 0.0;
  Dims dims;
  std::vector<double> values;  // x-fastest like Volume3D
  std::vector<LayerRelevance> layers;  // output layer first
  LrpConfig config;

  double sum() const;
  double min() const;
  double max() const;
  Volume3D to_volume() const;
};

/// Folds every batch norm into its convolution and marks the model; dropout
/// is inference-identity and needs no change. Folded models are returned as is.
TrainedModel canonicalize(const TrainedModel& model);

/// Relevance of every input voxel for `target_class`. Models that are not yet
/// canonical are canonicalized first. All arithmetic is in double.
RelevanceMap lrp_relevance(const TrainedModel& model, const Volume3D& input, int target_class,
                           const LrpConfig& config = {});

// Single-layer rules, exposed for testing and reuse.

struct LayerRuleResult {
  std::vector<double> lower;
  double absorbed = 0.0;
};

/// Dense layer: x [D], weights [D, K] row-major, upper [K].
LayerRuleResult lrp_dense(std::span<const double> x, std::span<const double> weights, std::span<const double> upper,
                          const LrpConfig& config);

/// Convolution: x [1, C, A, B, D], kernels [F, C, 3, 3, 3], upper [1, F, A, B, D].
LayerRuleResult lrp_conv(const TensorD& x, const TensorD& kernels, const TensorD& upper, const LrpConfig& config);

struct ConservationReport {
  double logit = 0.0;
  double seed = 0.0;
  double input_total = 0.0;
  std::vector<LayerRelevance> layers;
  std::vector<std::string> flagged;  // layers whose lower sum deviates > 1e-3 relative from the upper sum
  bool map_matches = true;           // map total equals the recomputed input total
};

ConservationReport conservation_report(const TrainedModel& model, const Volume3D& input, const RelevanceMap& map);

/// Affine rescale with min -> lo and max -> hi; constant maps become lo.
RelevanceMap scale_map(const RelevanceMap& map, double lo, double hi);

/// Keeps the ceil(p% * n) largest values (ties in scan order), zeroes the rest.
RelevanceMap threshold_top_percentile(const RelevanceMap& map, double p);
/// Number of voxels threshold_top_percentile keeps out of n.
std::size_t top_percentile_count(std::size_t n, double p);

/// Defined on raw maps: a rescaled map no longer has its sign.
BinaryMask binarize_positive(const RelevanceMap& map);
BinaryMask binarize_positive(std::span<const double> values, Dims dims);

/// Removes 26-connected components with fewer than min_size voxels.
BinaryMask filter_clusters(const BinaryMask& mask, std::size_t min_size);

/// Per-slice relevance totals along `axis`.
std::vector<double> slice_histogram(const RelevanceMap& map, Axis axis = Axis::Coronal);
std::vector<double> slice_histogram(const Volume3D& v, Axis axis);

/// VOXW volume plus `<path>.json` sidecar with subject, class, logit and model.
void save_relevance_map(const RelevanceMap& map, const std::filesystem::path& path);
RelevanceMap load_relevance_map(const std::filesystem::path& path);

}  // namespace voxlrp
