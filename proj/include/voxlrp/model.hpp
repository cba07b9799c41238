#pragma once

// Volumetric classifier: n_blocks of conv(3^3, same) -> batchnorm -> maxpool(2^3)
// -> relu [-> dropout], flatten, then n_fc_layers dense layers with relu between.
//
// Volumes of dims (nx, ny, nz) enter as tensors [N, 1, nz, ny, nx].

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "voxlrp/kernels.hpp"
#include "voxlrp/tensor.hpp"
#include "voxlrp/volume.hpp"

namespace voxlrp {

enum class DropoutPlacement { AfterEachBlock, AfterAllBlocks };

std::string to_string(DropoutPlacement p);
DropoutPlacement parse_dropout_placement(const std::string& s);

struct ModelSpec {
  int n_blocks = 3;
  int filters = 5;
  DropoutPlacement dropout_placement = DropoutPlacement::AfterAllBlocks;
  double dropout_rate = 0.4;
  int n_fc_layers = 1;
  int n_classes = 2;
  Dims input_dims{32, 32, 32};

  /// Throws InvalidArgument for bad fields, ShapeMismatch when the spatial
  /// extents do not survive n_blocks halvings.
  void validate() const;
  /// [1, nz, ny, nx] spatial input shape without the batch axis.
  Shape input_shape() const;
  /// Spatial extents [a, b, d] after block `b` (0-based), floor pooling.
  std::array<std::size_t, 3> extents_after(int block) const;
  std::size_t flatten_width() const;

  bool operator==(const ModelSpec&) const = default;
};

nlohmann::json spec_to_json(const ModelSpec& s);
ModelSpec spec_from_json(const nlohmann::json& j);

template <typename T>
struct Weights {
  std::vector<Tensor<T>> conv_w, conv_b;      // [F,C,3,3,3], [F]
  std::vector<Tensor<T>> bn_gamma, bn_beta;   // [F]
  std::vector<Tensor<T>> bn_mean, bn_var;     // running statistics, not trained
  std::vector<Tensor<T>> fc_w, fc_b;          // [D,K], [K]

  /// Trainable tensors in canonical order, interleaved per layer.
  std::vector<Tensor<T>*> trainable();
  std::vector<const Tensor<T>*> trainable() const;
  std::vector<std::string> trainable_names() const;

  template <typename U>
  Weights<U> cast() const;

  bool operator==(const Weights&) const = default;
};

struct TrainedModel {
  ModelSpec spec;
  Weights<float> weights;
  bool bn_folded = false;   // batch norm already merged into the convolutions
  nlohmann::json train_meta = nlohmann::json::object();

  bool operator==(const TrainedModel&) const = default;
};

/// He-uniform weights U(-sqrt(6/fan_in), +sqrt(6/fan_in)), zero biases,
/// gamma 1, beta 0, running mean 0 and variance 1.
TrainedModel build_model(const ModelSpec& spec, std::uint64_t seed);

struct LayerCount {
  std::string layer;
  std::size_t trainable = 0;
  std::size_t non_trainable = 0;
};

struct ParameterCount {
  std::vector<LayerCount> layers;
  std::size_t trainable = 0;
  std::size_t non_trainable = 0;
  std::size_t total() const { return trainable + non_trainable; }
};

ParameterCount count_parameters(const ModelSpec& spec);
/// Scalars actually held by `w`, split the same way as count_parameters.
ParameterCount count_allocated(const Weights<float>& w);

// --- forward / backward ----------------------------------------------------

template <typename T>
struct BlockCache {
  Tensor<T> input;
  Tensor<T> conv_out;
  BatchNormResult<T> bn;
  bool has_bn = false;
  Tensor<T> pool_out;
  std::vector<std::size_t> argmax;
  Tensor<T> relu_out;
  std::vector<std::uint8_t> keep;  // empty when no dropout ran
  Tensor<T> output;
};

template <typename T>
struct ForwardCache {
  Mode mode = Mode::Infer;
  std::vector<BlockCache<T>> blocks;
  std::vector<std::uint8_t> final_keep;     // AfterAllBlocks dropout
  std::vector<Tensor<T>> fc_inputs;         // [N, D_i]
  std::vector<Tensor<T>> fc_pre;            // pre-activation of each dense layer
  Tensor<T> logits;
  bool degenerate_bn = false;
};

/// `rng` may be null in infer mode.
template <typename T>
ForwardCache<T> forward(const ModelSpec& spec, const Weights<T>& w, bool bn_folded, const Tensor<T>& batch,
                        Mode mode, std::mt19937_64* rng);

/// Gradients of the loss given d_logits; running statistics fields hold the
/// train-mode updated statistics from the cache.
template <typename T>
Weights<T> backward(const ModelSpec& spec, const Weights<T>& w, const ForwardCache<T>& cache,
                    const Tensor<T>& d_logits);

/// Stacks volumes into [N, 1, nz, ny, nx].
TensorF volumes_to_batch(const std::vector<const Volume3D*>& volumes);

/// Infer-mode logits for one volume.
std::vector<double> predict_logits(const TrainedModel& model, const Volume3D& v);

// --- persistence -------------------------------------------------------------

// "VOXM0001", u32 LE header length, JSON header (spec, flags, meta, tensor
// table with name/shape/offset), then the tensors as raw f32 LE.
std::vector<std::uint8_t> encode_model(const TrainedModel& m);
TrainedModel decode_model(std::span<const std::uint8_t> bytes);
void save_model(const TrainedModel& m, const std::filesystem::path& path);
TrainedModel load_model(const std::filesystem::path& path);

}  // namespace voxlrp
