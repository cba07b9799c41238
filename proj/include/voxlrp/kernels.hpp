#pragma once

// Forward and reverse kernels for every layer of the volumetric classifier.
//
// Layout: activations are [N, C, A, B, D] with D fastest. Volumes map onto
// this as [N, 1, nz, ny, nx] so no copy is needed.
//
// Reductions accumulate in double with a fixed order per output element, so
// results never depend on how callers schedule work across threads.

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "voxlrp/tensor.hpp"

namespace voxlrp {

enum class Mode { Train, Infer };

template <typename T>
struct LayerGrads {
  Tensor<T> d_input;
  Tensor<T> d_weights;
  Tensor<T> d_bias;
};

// --- conv3d: 3x3x3 kernels, stride 1, zero padding 1 ("same") ---------------

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias);

/// `need_input_grad = false` skips d_input (first layer of a network).
template <typename T>
LayerGrads<T> conv3d_backward(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& d_output,
                              bool need_input_grad = true);

/// Transposed "same" convolution: the input gradient of conv3d for d_output.
template <typename T>
Tensor<T> conv3d_input_grad(const Tensor<T>& kernels, const Tensor<T>& d_output);

// --- maxpool3d: window 2, stride 2, trailing odd extents truncated ----------

template <typename T>
struct PoolResult {
  Tensor<T> output;
  std::vector<std::size_t> argmax;  // flat input index per output cell
};

template <typename T>
PoolResult<T> maxpool3d(const Tensor<T>& input);

template <typename T>
Tensor<T> maxpool3d_backward(const Shape& input_shape, std::span<const std::size_t> argmax,
                             const Tensor<T>& d_output);

// --- batch normalization over N and spatial axes -----------------------------

template <typename T>
struct BatchNormResult {
  Tensor<T> output;
  Tensor<T> x_hat;
  std::vector<double> inv_std;  // per channel
  Tensor<T> running_mean;       // updated in train mode, passed through otherwise
  Tensor<T> running_var;
  Mode mode = Mode::Infer;
  bool degenerate = false;      // train mode saw a zero-variance channel
};

struct BatchNormOptions {
  double momentum = 0.99;  // running = momentum * running + (1 - momentum) * batch
  double eps = 1e-3;
};

template <typename T>
BatchNormResult<T> batchnorm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                             Mode mode, const Tensor<T>& running_mean, const Tensor<T>& running_var,
                             BatchNormOptions options = {});

/// d_weights holds d_gamma, d_bias holds d_beta.
template <typename T>
LayerGrads<T> batchnorm_backward(const BatchNormResult<T>& forward, const Tensor<T>& gamma,
                                 const Tensor<T>& d_output);

// --- dense ------------------------------------------------------------------

template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias);

template <typename T>
LayerGrads<T> dense_backward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& d_output);

// --- pointwise ----------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& input);

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& d_output);

/// Row-wise softmax over the last axis of [N, K].
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

template <typename T>
struct LossResult {
  double loss = 0.0;
  Tensor<T> d_logits;
};

/// Mean over the batch of -log softmax(logits)[label].
template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

// --- inverted dropout -----------------------------------------------------------

template <typename T>
struct DropoutResult {
  Tensor<T> output;
  std::vector<std::uint8_t> keep;  // 1 where the element survived
};

template <typename T>
DropoutResult<T> dropout(const Tensor<T>& input, double rate, Mode mode, std::mt19937_64& rng);

template <typename T>
Tensor<T> dropout_backward(std::span<const std::uint8_t> keep, double rate, const Tensor<T>& d_output);

// --- finite differences -----------------------------------------------------------

using ScalarFunction = std::function<double(std::span<const double>)>;

/// Central differences (f(x+eps) - f(x-eps)) / (2 eps) per parameter.
std::vector<double> numerical_gradient(const ScalarFunction& f, std::vector<double> params, double eps = 1e-4);

/// ||a - b|| / max(||a||, ||b||, floor); 0 when both are below the floor.
double relative_error(std::span<const double> a, std::span<const double> b, double floor = 1e-12);

}  // namespace voxlrp
