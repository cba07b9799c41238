#pragma once

// Test-side helpers: nested-loop oracles, finite differences, temp dirs.
// Nothing here calls into the kernels it is used to check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <unistd.h>

#include "voxlrp/kernels.hpp"
#include "voxlrp/tensor.hpp"

namespace testing {

using voxlrp::Shape;
using voxlrp::TensorD;
using voxlrp::TensorF;

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "voxlrp") {
    std::string tmpl = (std::filesystem::temp_directory_path() / (tag + "-XXXXXX")).string();
    path_ = ::mkdtemp(tmpl.data());
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

template <typename T = double>
voxlrp::Tensor<T> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  voxlrp::Tensor<T> t(shape);
  for (auto& v : t.data()) v = static_cast<T>(u(rng));
  return t;
}

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// out[n,f,a,b,d] = sum_c sum_ka sum_kb sum_kd w[f,c,ka,kb,kd] * in[n,c,a+ka-1,b+kb-1,d+kd-1] + bias[f]
// Accumulated with fma in exactly that loop order, bias last; out-of-range taps skipped.
inline TensorD conv3d_oracle(const TensorD& in, const TensorD& w, const TensorD& bias) {
  const std::size_t N = in.dim(0), C = in.dim(1), A = in.dim(2), B = in.dim(3), D = in.dim(4);
  const std::size_t F = w.dim(0);
  TensorD out({N, F, A, B, D});
  auto X = [&](std::size_t n, std::size_t c, std::size_t a, std::size_t b, std::size_t d) {
    return in[(((n * C + c) * A + a) * B + b) * D + d];
  };
  auto W = [&](std::size_t f, std::size_t c, std::size_t ka, std::size_t kb, std::size_t kd) {
    return w[(((f * C + c) * 3 + ka) * 3 + kb) * 3 + kd];
  };
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t a = 0; a < A; ++a)
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t d = 0; d < D; ++d) {
            double acc = 0.0;
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t ka = 0; ka < 3; ++ka)
                for (std::size_t kb = 0; kb < 3; ++kb)
                  for (std::size_t kd = 0; kd < 3; ++kd) {
                    const long ia = long(a + ka) - 1, ib = long(b + kb) - 1, id = long(d + kd) - 1;
                    if (ia < 0 || ib < 0 || id < 0 || ia >= long(A) || ib >= long(B) || id >= long(D)) continue;
                    acc = std::fma(W(f, c, ka, kb, kd), X(n, c, std::size_t(ia), std::size_t(ib), std::size_t(id)),
                                   acc);
                  }
            out[(((n * F + f) * A + a) * B + b) * D + d] = acc + bias[f];
          }
  return out;
}

struct PoolOracle {
  TensorD output;
  std::vector<std::size_t> argmax;
};

// 2x2x2 windows, stride 2, trailing odd extents dropped, first maximum in scan order.
inline PoolOracle maxpool_oracle(const TensorD& in) {
  const std::size_t N = in.dim(0), C = in.dim(1), A = in.dim(2), B = in.dim(3), D = in.dim(4);
  const std::size_t oa = A / 2, ob = B / 2, od = D / 2;
  PoolOracle r{TensorD({N, C, oa, ob, od}), {}};
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t a = 0; a < oa; ++a)
        for (std::size_t b = 0; b < ob; ++b)
          for (std::size_t d = 0; d < od; ++d) {
            std::size_t best = 0;
            bool first = true;
            for (std::size_t i = 0; i < 2; ++i)
              for (std::size_t j = 0; j < 2; ++j)
                for (std::size_t k = 0; k < 2; ++k) {
                  const std::size_t idx = (((n * C + c) * A + 2 * a + i) * B + 2 * b + j) * D + 2 * d + k;
                  if (first || in[idx] > in[best]) best = idx;
                  first = false;
                }
            r.output[(((n * C + c) * oa + a) * ob + b) * od + d] = in[best];
            r.argmax.push_back(best);
          }
  return r;
}

// Central differences over a flat parameter vector.
inline std::vector<double> central_differences(const std::function<double(const std::vector<double>&)>& f,
                                               std::vector<double> p, double h = 1e-5) {
  std::vector<double> g(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double keep = p[i];
    p[i] = keep + h;
    const double up = f(p);
    p[i] = keep - h;
    const double down = f(p);
    p[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline double rel_err(std::span<const double> a, std::span<const double> b) {
  double num = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double den = std::sqrt(std::max(na, nb));
  return den < 1e-300 ? std::sqrt(num) : std::sqrt(num) / den;
}

inline double dot(const TensorD& a, const TensorD& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Packs tensors into one vector and back, for perturbing several inputs at once.
struct Packer {
  std::vector<TensorD*> parts;

  std::vector<double> pack() const {
    std::vector<double> v;
    for (const auto* t : parts) v.insert(v.end(), t->data().begin(), t->data().end());
    return v;
  }
  void unpack(const std::vector<double>& v) const {
    std::size_t o = 0;
    for (auto* t : parts)
      for (auto& x : t->data()) x = v[o++];
  }
};

inline std::vector<double> concat(std::initializer_list<const TensorD*> ts) {
  std::vector<double> v;
  for (const auto* t : ts) v.insert(v.end(), t->data().begin(), t->data().end());
  return v;
}

// One gradient check per kernel and seed; each returns the relative error of
// the analytic gradient against central differences of f = sum(out * G).

inline double conv_grad_check(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t N = pick(rng, 1, 2), C = pick(rng, 1, 3), F = pick(rng, 1, 3);
  const Shape xs{N, C, pick(rng, 1, 5), pick(rng, 1, 5), pick(rng, 1, 5)};
  TensorD x = random_tensor(xs, rng), w = random_tensor({F, C, 3, 3, 3}, rng), b = random_tensor({F}, rng);
  const TensorD G = random_tensor({N, F, xs[2], xs[3], xs[4]}, rng);
  const auto g = voxlrp::conv3d_backward(x, w, G);
  Packer pk{{&x, &w, &b}};
  const auto num = central_differences(
      [&](const std::vector<double>& p) {
        pk.unpack(p);
        return dot(conv3d_oracle(x, w, b), G);
      },
      pk.pack());
  return rel_err(concat({&g.d_input, &g.d_weights, &g.d_bias}), num);
}

inline double maxpool_grad_check(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const Shape xs{pick(rng, 1, 2), pick(rng, 1, 3), pick(rng, 2, 6), pick(rng, 2, 6), pick(rng, 2, 6)};
  const std::size_t n = voxlrp::shape_product(xs);
  // Distinct values with gaps far above the step so no window changes its winner.
  std::vector<double> vals(n);
  for (std::size_t i = 0; i < n; ++i) vals[i] = 0.01 * static_cast<double>(i);
  std::shuffle(vals.begin(), vals.end(), rng);
  TensorD x(xs, vals);
  const auto ref = maxpool_oracle(x);
  const TensorD G = random_tensor(ref.output.shape(), rng);
  const auto fwd = voxlrp::maxpool3d(x);
  const TensorD dx = voxlrp::maxpool3d_backward(xs, fwd.argmax, G);
  Packer pk{{&x}};
  const auto num = central_differences(
      [&](const std::vector<double>& p) {
        pk.unpack(p);
        return dot(maxpool_oracle(x).output, G);
      },
      pk.pack());
  return rel_err(dx.data(), num);
}

// Train-mode batch norm written out per channel.
inline TensorD batchnorm_oracle(const TensorD& x, const TensorD& gamma, const TensorD& beta, double eps) {
  const std::size_t N = x.dim(0), C = x.dim(1), S = x.size() / (N * C);
  TensorD y(x.shape());
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0.0, var = 0.0;
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t s = 0; s < S; ++s) mean += x[(n * C + c) * S + s];
    mean /= double(N * S);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t s = 0; s < S; ++s) var += (x[(n * C + c) * S + s] - mean) * (x[(n * C + c) * S + s] - mean);
    var /= double(N * S);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t i = (n * C + c) * S + s;
        y[i] = gamma[c] * (x[i] - mean) / std::sqrt(var + eps) + beta[c];
      }
  }
  return y;
}

inline double batchnorm_grad_check(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t C = pick(rng, 1, 3);
  const Shape xs{pick(rng, 2, 3), C, pick(rng, 1, 4), pick(rng, 2, 4), pick(rng, 2, 4)};
  TensorD x = random_tensor(xs, rng, -2.0, 2.0);
  TensorD gamma = random_tensor({C}, rng, 0.5, 1.5), beta = random_tensor({C}, rng);
  const TensorD G = random_tensor(xs, rng);
  const TensorD rm({C}, 0.0), rv({C}, 1.0);
  const voxlrp::BatchNormOptions opt;
  const auto fwd = voxlrp::batchnorm(x, gamma, beta, voxlrp::Mode::Train, rm, rv, opt);
  const auto g = voxlrp::batchnorm_backward(fwd, gamma, G);
  Packer pk{{&x, &gamma, &beta}};
  const auto num = central_differences(
      [&](const std::vector<double>& p) {
        pk.unpack(p);
        return dot(batchnorm_oracle(x, gamma, beta, opt.eps), G);
      },
      pk.pack());
  return rel_err(concat({&g.d_input, &g.d_weights, &g.d_bias}), num);
}

inline TensorD dense_oracle(const TensorD& x, const TensorD& w, const TensorD& b) {
  const std::size_t N = x.dim(0), D = x.dim(1), K = w.dim(1);
  TensorD y({N, K});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t k = 0; k < K; ++k) {
      double acc = b[k];
      for (std::size_t d = 0; d < D; ++d) acc += x[n * D + d] * w[d * K + k];
      y[n * K + k] = acc;
    }
  return y;
}

inline double dense_grad_check(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t N = pick(rng, 1, 4), D = pick(rng, 1, 8), K = pick(rng, 1, 4);
  TensorD x = random_tensor({N, D}, rng), w = random_tensor({D, K}, rng), b = random_tensor({K}, rng);
  const TensorD G = random_tensor({N, K}, rng);
  const auto g = voxlrp::dense_backward(x, w, G);
  Packer pk{{&x, &w, &b}};
  const auto num = central_differences(
      [&](const std::vector<double>& p) {
        pk.unpack(p);
        return dot(dense_oracle(x, w, b), G);
      },
      pk.pack());
  return rel_err(concat({&g.d_input, &g.d_weights, &g.d_bias}), num);
}

inline double cross_entropy_oracle(const TensorD& logits, std::span<const int> labels) {
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  double loss = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    double mx = logits[n * K];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, logits[n * K + k]);
    double s = 0.0;
    for (std::size_t k = 0; k < K; ++k) s += std::exp(logits[n * K + k] - mx);
    loss += mx + std::log(s) - logits[n * K + std::size_t(labels[n])];
  }
  return loss / double(N);
}

inline double cross_entropy_grad_check(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t N = pick(rng, 1, 6), K = pick(rng, 2, 4);
  TensorD z = random_tensor({N, K}, rng, -3.0, 3.0);
  std::vector<int> labels(N);
  for (auto& l : labels) l = int(pick(rng, 0, K - 1));
  const auto r = voxlrp::cross_entropy(z, std::span<const int>(labels));
  Packer pk{{&z}};
  const auto num = central_differences(
      [&](const std::vector<double>& p) {
        pk.unpack(p);
        return cross_entropy_oracle(z, labels);
      },
      pk.pack());
  return rel_err(r.d_logits.data(), num);
}

// Exhaustive pairwise concordance, ties counted 1/2.
inline double concordance_auc(std::span<const double> s, std::span<const int> t) {
  double num = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!t[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (t[j]) continue;
      pairs += 1.0;
      num += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  }
  return num / pairs;
}

}  // namespace testing
