#include "voxlrp/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "simd.hpp"

namespace voxlrp {

std::string shape_to_string(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

namespace {

struct Spatial {
  std::size_t a, b, d;
  std::size_t count() const { return a * b * d; }
};

Spatial spatial_of(const Shape& s) { return {s[2], s[3], s[4]}; }

inline double combine_lanes(const double* l) {
  return ((l[0] + l[1]) + (l[2] + l[3])) + ((l[4] + l[5]) + (l[6] + l[7]));
}

// Sum of f(i) over i < n in eight interleaved lanes, combined in a fixed order.
template <typename F>
inline double lane_sum(std::size_t n, F f) {
  double l[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int k = 0; k < 8; ++k) l[k] += f(i + k);
  for (int k = 0; i < n; ++i, ++k) l[k] += f(i);
  return combine_lanes(l);
}

template <typename T>
void check_conv_shapes(const Tensor<T>& input, const Tensor<T>& kernels) {
  require(input.rank() == 5, ErrorCode::ShapeMismatch, "conv3d: input must be [N,C,X,Y,Z]");
  require(kernels.rank() == 5 && kernels.dim(2) == 3 && kernels.dim(3) == 3 && kernels.dim(4) == 3,
          ErrorCode::ShapeMismatch, "conv3d: kernels must be [F,C,3,3,3]");
  require(kernels.dim(1) == input.dim(1), ErrorCode::ShapeMismatch,
          "conv3d: channel mismatch, input " + shape_to_string(input.shape()) + " kernels " +
              shape_to_string(kernels.shape()));
}

// Zero-padded double copy of [C, A, B, D]: one voxel of halo on every side and
// rows rounded up to whole 8-lane tiles, so the microkernels need no bounds checks.
struct Padded {
  std::size_t A = 0, B = 0, D = 0, Dr = 0, Bp = 0, Dp = 0, chan = 0;
  std::vector<double> data;

  Padded(std::size_t a, std::size_t b, std::size_t d, std::size_t channels)
      : A(a), B(b), D(d), Dr((d + 7) / 8 * 8), Bp(b + 2), Dp(Dr + 2), chan((a + 2) * (b + 2) * Dp),
        data(channels * chan, 0.0) {}

  template <typename T>
  void load(const T* src, std::size_t channels) {
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t x = 0; x < A; ++x)
        for (std::size_t y = 0; y < B; ++y) {
          const T* in = src + ((c * A + x) * B + y) * D;
          double* dst = data.data() + c * chan + ((x + 1) * Bp + (y + 1)) * Dp + 1;
          for (std::size_t z = 0; z < D; ++z) dst[z] = static_cast<double>(in[z]);
        }
  }
};

// out[fi][p] = sum over (c, ka, kb, kd) in that order of w[fi][c][k] * in[c][p + k - 1].
// YB output rows (y, y+1) share each weight broadcast for more independent chains.
template <int FB, int YB, typename Out>
inline void conv_tile(const Padded& in, std::size_t C, const double* w, const double* bias, Out* out, std::size_t x,
                      std::size_t y, std::size_t z0) {
  const std::size_t B = in.B, D = in.D, vol = in.A * B * D;
  simd::D8 acc[FB][YB];
  for (int fi = 0; fi < FB; ++fi)
    for (int yi = 0; yi < YB; ++yi) acc[fi][yi] = simd::D8::zero();
  for (std::size_t c = 0; c < C; ++c) {
    const double* base = in.data.data() + c * in.chan + z0;
    for (std::size_t ka = 0; ka < 3; ++ka)
      for (std::size_t kb = 0; kb < 3; ++kb) {
        const double* row = base + ((x + ka) * in.Bp + (y + kb)) * in.Dp;
        for (std::size_t kd = 0; kd < 3; ++kd) {
          simd::D8 r[YB];
          for (int yi = 0; yi < YB; ++yi) r[yi] = simd::D8::load(row + yi * in.Dp + kd);
          for (int fi = 0; fi < FB; ++fi) {
            const simd::D8 wv = simd::D8::broadcast(w[(fi * C + c) * 27 + ka * 9 + kb * 3 + kd]);
            for (int yi = 0; yi < YB; ++yi) acc[fi][yi] = simd::fma(wv, r[yi], acc[fi][yi]);
          }
        }
      }
  }
  const std::size_t n = std::min<std::size_t>(8, D - z0);
  for (int fi = 0; fi < FB; ++fi) {
    const double b = bias ? bias[fi] : 0.0;
    for (int yi = 0; yi < YB; ++yi) {
      Out* o = out + fi * vol + (x * B + y + yi) * D + z0;
      double tmp[8];
      acc[fi][yi].store(tmp);
      for (std::size_t l = 0; l < n; ++l) o[l] = static_cast<Out>(tmp[l] + b);
    }
  }
}

template <int FB, typename Out>
void conv_block(const Padded& in, std::size_t C, const double* w, const double* bias, Out* out) {
  const std::size_t A = in.A, B = in.B, D = in.D;
  for (std::size_t x = 0; x < A; ++x) {
    std::size_t y = 0;
    for (; y + 2 <= B; y += 2)
      for (std::size_t z0 = 0; z0 < D; z0 += 8) conv_tile<FB, 2>(in, C, w, bias, out, x, y, z0);
    for (; y < B; ++y)
      for (std::size_t z0 = 0; z0 < D; z0 += 8) conv_tile<FB, 1>(in, C, w, bias, out, x, y, z0);
  }
}

// Weights [F][C][27] in double; out is [F][A*B*D]; bias may be null.
template <typename Out>
void conv_all(const Padded& in, std::size_t C, std::size_t F, const double* w, const double* bias, Out* out) {
  const std::size_t vol = in.A * in.B * in.D;
  std::size_t f = 0;
  for (; f + 8 <= F; f += 8) conv_block<8>(in, C, w + f * C * 27, bias ? bias + f : nullptr, out + f * vol);
  const double* wr = w + f * C * 27;
  const double* br = bias ? bias + f : nullptr;
  Out* o = out + f * vol;
  switch (F - f) {
    case 1: conv_block<1>(in, C, wr, br, o); break;
    case 2: conv_block<2>(in, C, wr, br, o); break;
    case 3: conv_block<3>(in, C, wr, br, o); break;
    case 4: conv_block<4>(in, C, wr, br, o); break;
    case 5: conv_block<5>(in, C, wr, br, o); break;
    case 6: conv_block<6>(in, C, wr, br, o); break;
    case 7: conv_block<7>(in, C, wr, br, o); break;
    default: break;
  }
}

// lanes[fi][c][k][l] += gout[fi][p] * in[c][p + k - 1], lane l = z mod 8.
// gout rows are [A][B][Dr] with a zero tail beyond D.
template <int FB>
void wgrad_block(const Padded& in, std::size_t C, const double* gout, double* lanes) {
  const std::size_t A = in.A, B = in.B, D = in.D, Dr = in.Dr, gvol = A * B * Dr;
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t ka = 0; ka < 3; ++ka)
      for (std::size_t kb = 0; kb < 3; ++kb) {
        simd::D8 acc[FB][3];
        for (int fi = 0; fi < FB; ++fi)
          for (int kd = 0; kd < 3; ++kd)
            acc[fi][kd] = simd::D8::load(&lanes[(((fi * C + c) * 27) + ka * 9 + kb * 3 + kd) * 8]);
        for (std::size_t x = 0; x < A; ++x)
          for (std::size_t y = 0; y < B; ++y) {
            const double* row = in.data.data() + c * in.chan + ((x + ka) * in.Bp + (y + kb)) * in.Dp;
            const double* go = gout + (x * B + y) * Dr;
            for (std::size_t z0 = 0; z0 < D; z0 += 8) {
              simd::D8 g[FB];
              for (int fi = 0; fi < FB; ++fi) g[fi] = simd::D8::load(go + fi * gvol + z0);
              for (int kd = 0; kd < 3; ++kd) {
                const simd::D8 r = simd::D8::load(row + z0 + kd);
                for (int fi = 0; fi < FB; ++fi) acc[fi][kd] = simd::fma(g[fi], r, acc[fi][kd]);
              }
            }
          }
        for (int fi = 0; fi < FB; ++fi)
          for (int kd = 0; kd < 3; ++kd) acc[fi][kd].store(&lanes[(((fi * C + c) * 27) + ka * 9 + kb * 3 + kd) * 8]);
      }
}

void wgrad_all(const Padded& in, std::size_t C, std::size_t F, const double* gout, double* lanes) {
  const std::size_t gvol = in.A * in.B * in.Dr;
  std::size_t f = 0;
  for (; f + 6 <= F; f += 6) wgrad_block<6>(in, C, gout + f * gvol, lanes + f * C * 27 * 8);
  const double* g = gout + f * gvol;
  double* l = lanes + f * C * 27 * 8;
  switch (F - f) {
    case 1: wgrad_block<1>(in, C, g, l); break;
    case 2: wgrad_block<2>(in, C, g, l); break;
    case 3: wgrad_block<3>(in, C, g, l); break;
    case 4: wgrad_block<4>(in, C, g, l); break;
    case 5: wgrad_block<5>(in, C, g, l); break;
    default: break;
  }
}

}  // namespace

// --- conv3d -------------------------------------------------------------------

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias) {
  check_conv_shapes(input, kernels);
  const std::size_t N = input.dim(0), C = input.dim(1), F = kernels.dim(0);
  require(bias.rank() == 1 && bias.dim(0) == F, ErrorCode::ShapeMismatch, "conv3d: bias must be [F]");
  const Spatial s = spatial_of(input.shape());
  const std::size_t vol = s.count();
  const std::vector<double> w(kernels.data().begin(), kernels.data().end());
  const std::vector<double> b(bias.data().begin(), bias.data().end());
  Tensor<T> out({N, F, s.a, s.b, s.d});
  Padded pad(s.a, s.b, s.d, C);
  for (std::size_t n = 0; n < N; ++n) {
    pad.load(input.ptr() + n * C * vol, C);
    conv_all(pad, C, F, w.data(), b.data(), out.ptr() + n * F * vol);
  }
  return out;
}

template <typename T>
LayerGrads<T> conv3d_backward(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& d_output,
                              bool need_input_grad) {
  check_conv_shapes(input, kernels);
  const std::size_t N = input.dim(0), C = input.dim(1), F = kernels.dim(0);
  const Spatial s = spatial_of(input.shape());
  require(d_output.shape() == Shape({N, F, s.a, s.b, s.d}), ErrorCode::ShapeMismatch,
          "conv3d_backward: d_output shape mismatch");
  const std::size_t vol = s.count();

  LayerGrads<T> g;
  g.d_weights = Tensor<T>(kernels.shape());
  g.d_bias = Tensor<T>({F});

  Padded pad_in(s.a, s.b, s.d, C);
  const std::size_t Dr = pad_in.Dr;
  std::vector<double> gout(F * s.a * s.b * Dr, 0.0);
  std::vector<double> lanes(F * C * 27 * 8, 0.0);
  std::vector<double> bias_lanes(F * 8, 0.0);

  // d_input is a "same" convolution of d_output with the flipped, transposed kernels.
  std::vector<double> flipped;
  Padded pad_out(s.a, s.b, s.d, need_input_grad ? F : 0);
  if (need_input_grad) {
    g.d_input = Tensor<T>(input.shape());
    flipped.resize(C * F * 27);
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t k = 0; k < 27; ++k) flipped[(c * F + f) * 27 + (26 - k)] = kernels[(f * C + c) * 27 + k];
  }

  for (std::size_t n = 0; n < N; ++n) {
    const T* go = d_output.ptr() + n * F * vol;
    pad_in.load(input.ptr() + n * C * vol, C);
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t r = 0; r < s.a * s.b; ++r) {
        const T* src = go + f * vol + r * s.d;
        double* dst = gout.data() + (f * s.a * s.b + r) * Dr;
        for (std::size_t z = 0; z < s.d; ++z) {
          dst[z] = static_cast<double>(src[z]);
          bias_lanes[f * 8 + (z & 7)] += dst[z];
        }
      }
    wgrad_all(pad_in, C, F, gout.data(), lanes.data());
    if (need_input_grad) {
      pad_out.load(go, F);
      conv_all(pad_out, F, C, flipped.data(), static_cast<const double*>(nullptr), g.d_input.ptr() + n * C * vol);
    }
  }
  for (std::size_t i = 0; i < F * C * 27; ++i) g.d_weights[i] = static_cast<T>(combine_lanes(&lanes[i * 8]));
  for (std::size_t f = 0; f < F; ++f) g.d_bias[f] = static_cast<T>(combine_lanes(&bias_lanes[f * 8]));
  return g;
}

template <typename T>
Tensor<T> conv3d_input_grad(const Tensor<T>& kernels, const Tensor<T>& d_output) {
  require(d_output.rank() == 5 && kernels.rank() == 5 && kernels.dim(0) == d_output.dim(1), ErrorCode::ShapeMismatch,
          "conv3d_input_grad: kernels " + shape_to_string(kernels.shape()) + " do not match d_output " +
              shape_to_string(d_output.shape()));
  const std::size_t N = d_output.dim(0), F = kernels.dim(0), C = kernels.dim(1);
  const Spatial s = spatial_of(d_output.shape());
  const std::size_t vol = s.count();
  std::vector<double> flipped(C * F * 27);
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t k = 0; k < 27; ++k) flipped[(c * F + f) * 27 + (26 - k)] = kernels[(f * C + c) * 27 + k];
  Tensor<T> out({N, C, s.a, s.b, s.d});
  Padded pad(s.a, s.b, s.d, F);
  for (std::size_t n = 0; n < N; ++n) {
    pad.load(d_output.ptr() + n * F * vol, F);
    conv_all(pad, F, C, flipped.data(), static_cast<const double*>(nullptr), out.ptr() + n * C * vol);
  }
  return out;
}

// --- maxpool3d -------------------------------------------------------------------

template <typename T>
PoolResult<T> maxpool3d(const Tensor<T>& input) {
  require(input.rank() == 5, ErrorCode::ShapeMismatch, "maxpool3d: input must be [N,C,X,Y,Z]");
  const Spatial s = spatial_of(input.shape());
  require(s.a >= 2 && s.b >= 2 && s.d >= 2, ErrorCode::ShapeMismatch,
          "maxpool3d: every spatial extent must be at least 2, got " + shape_to_string(input.shape()));
  const std::size_t N = input.dim(0), C = input.dim(1);
  const Spatial o{s.a / 2, s.b / 2, s.d / 2};
  PoolResult<T> r{Tensor<T>({N, C, o.a, o.b, o.d}), std::vector<std::size_t>(N * C * o.count())};
  std::size_t out_i = 0;
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const std::size_t base = nc * s.count();
    for (std::size_t x = 0; x < o.a; ++x)
      for (std::size_t y = 0; y < o.b; ++y)
        for (std::size_t z = 0; z < o.d; ++z, ++out_i) {
          std::size_t best = base + ((2 * x) * s.b + 2 * y) * s.d + 2 * z;
          T best_v = input[best];
          for (std::size_t wa = 0; wa < 2; ++wa)
            for (std::size_t wb = 0; wb < 2; ++wb)
              for (std::size_t wd = 0; wd < 2; ++wd) {
                const std::size_t idx = base + ((2 * x + wa) * s.b + 2 * y + wb) * s.d + 2 * z + wd;
                if (input[idx] > best_v) {
                  best_v = input[idx];
                  best = idx;
                }
              }
          r.output[out_i] = best_v;
          r.argmax[out_i] = best;
        }
  }
  return r;
}

template <typename T>
Tensor<T> maxpool3d_backward(const Shape& input_shape, std::span<const std::size_t> argmax,
                             const Tensor<T>& d_output) {
  require(argmax.size() == d_output.size(), ErrorCode::ShapeMismatch, "maxpool3d_backward: argmax size mismatch");
  Tensor<T> d_in(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) d_in[argmax[i]] += d_output[i];
  return d_in;
}

// --- batchnorm ------------------------------------------------------------------------

template <typename T>
BatchNormResult<T> batchnorm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, Mode mode,
                             const Tensor<T>& running_mean, const Tensor<T>& running_var,
                             BatchNormOptions options) {
  require(input.rank() >= 2, ErrorCode::ShapeMismatch, "batchnorm: input must be [N,C,...]");
  const std::size_t N = input.dim(0), C = input.dim(1);
  const std::size_t inner = input.size() / (N * C);
  for (const Tensor<T>* t : {&gamma, &beta, &running_mean, &running_var}) {
    require(t->rank() == 1 && t->dim(0) == C, ErrorCode::ShapeMismatch, "batchnorm: parameters must be [C]");
  }
  BatchNormResult<T> r;
  r.mode = mode;
  r.output = Tensor<T>(input.shape());
  r.x_hat = Tensor<T>(input.shape());
  r.inv_std.resize(C);
  r.running_mean = running_mean;
  r.running_var = running_var;
  const double m = static_cast<double>(N * inner);

  for (std::size_t c = 0; c < C; ++c) {
    double mean, var;
    if (mode == Mode::Train) {
      double sum = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = input.ptr() + (n * C + c) * inner;
        sum += lane_sum(inner, [p](std::size_t i) { return static_cast<double>(p[i]); });
      }
      mean = sum / m;
      double sq = 0.0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = input.ptr() + (n * C + c) * inner;
        sq += lane_sum(inner, [p, mean](std::size_t i) {
          const double d = p[i] - mean;
          return d * d;
        });
      }
      var = sq / m;
      if (var == 0.0) r.degenerate = true;
      r.running_mean[c] = static_cast<T>(options.momentum * running_mean[c] + (1.0 - options.momentum) * mean);
      r.running_var[c] = static_cast<T>(options.momentum * running_var[c] + (1.0 - options.momentum) * var);
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    const double inv = 1.0 / std::sqrt(var + options.eps);
    r.inv_std[c] = inv;
    const double gm = gamma[c], bt = beta[c];
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const double xh = (input[off + i] - mean) * inv;
        r.x_hat[off + i] = static_cast<T>(xh);
        r.output[off + i] = static_cast<T>(gm * xh + bt);
      }
    }
  }
  return r;
}

template <typename T>
LayerGrads<T> batchnorm_backward(const BatchNormResult<T>& fw, const Tensor<T>& gamma, const Tensor<T>& d_output) {
  require(d_output.shape() == fw.x_hat.shape(), ErrorCode::ShapeMismatch, "batchnorm_backward: shape mismatch");
  const std::size_t N = d_output.dim(0), C = d_output.dim(1);
  const std::size_t inner = d_output.size() / (N * C);
  const double m = static_cast<double>(N * inner);
  LayerGrads<T> g{Tensor<T>(d_output.shape()), Tensor<T>({C}), Tensor<T>({C})};
  for (std::size_t c = 0; c < C; ++c) {
    double dbeta = 0.0, dgamma = 0.0;
    for (std::size_t n = 0; n < N; ++n) {
      const T* dy = d_output.ptr() + (n * C + c) * inner;
      const T* xh = fw.x_hat.ptr() + (n * C + c) * inner;
      dbeta += lane_sum(inner, [dy](std::size_t i) { return static_cast<double>(dy[i]); });
      dgamma += lane_sum(inner, [dy, xh](std::size_t i) { return static_cast<double>(dy[i]) * xh[i]; });
    }
    g.d_bias[c] = static_cast<T>(dbeta);
    g.d_weights[c] = static_cast<T>(dgamma);
    const double scale = static_cast<double>(gamma[c]) * fw.inv_std[c];
    for (std::size_t n = 0; n < N; ++n) {
      const std::size_t off = (n * C + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        const double dy = d_output[off + i];
        g.d_input[off + i] = static_cast<T>(
            fw.mode == Mode::Train ? scale / m * (m * dy - dbeta - fw.x_hat[off + i] * dgamma) : scale * dy);
      }
    }
  }
  return g;
}

// --- dense -------------------------------------------------------------------------------

template <typename T>
Tensor<T> dense(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& bias) {
  require(input.rank() == 2 && weights.rank() == 2 && bias.rank() == 1, ErrorCode::ShapeMismatch,
          "dense: expected input [N,D], weights [D,K], bias [K]");
  const std::size_t N = input.dim(0), D = input.dim(1), K = weights.dim(1);
  require(weights.dim(0) == D && bias.dim(0) == K, ErrorCode::ShapeMismatch,
          "dense: shape mismatch " + shape_to_string(input.shape()) + " x " + shape_to_string(weights.shape()));
  Tensor<T> out({N, K});
  std::vector<double> acc(K);
  for (std::size_t n = 0; n < N; ++n) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t d = 0; d < D; ++d) {
      const double x = input[n * D + d];
      const T* w = weights.ptr() + d * K;
      for (std::size_t k = 0; k < K; ++k) acc[k] = std::fma(x, static_cast<double>(w[k]), acc[k]);
    }
    for (std::size_t k = 0; k < K; ++k) out[n * K + k] = static_cast<T>(acc[k] + static_cast<double>(bias[k]));
  }
  return out;
}

template <typename T>
LayerGrads<T> dense_backward(const Tensor<T>& input, const Tensor<T>& weights, const Tensor<T>& d_output) {
  const std::size_t N = input.dim(0), D = input.dim(1), K = weights.dim(1);
  require(d_output.shape() == Shape({N, K}), ErrorCode::ShapeMismatch, "dense_backward: d_output shape mismatch");
  LayerGrads<T> g{Tensor<T>({N, D}), Tensor<T>({D, K}), Tensor<T>({K})};
  std::vector<double> acc(D * K, 0.0);
  std::vector<double> bacc(K, 0.0);
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t d = 0; d < D; ++d) {
      const double x = input[n * D + d];
      double sum = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const double go = d_output[n * K + k];
        acc[d * K + k] = std::fma(x, go, acc[d * K + k]);
        sum = std::fma(go, static_cast<double>(weights[d * K + k]), sum);
      }
      g.d_input[n * D + d] = static_cast<T>(sum);
    }
    for (std::size_t k = 0; k < K; ++k) bacc[k] += d_output[n * K + k];
  }
  for (std::size_t i = 0; i < D * K; ++i) g.d_weights[i] = static_cast<T>(acc[i]);
  for (std::size_t k = 0; k < K; ++k) g.d_bias[k] = static_cast<T>(bacc[k]);
  return g;
}

// --- pointwise ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out = input;
  for (T& v : out.data()) v = v > T{0} ? v : T{0};
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& input, const Tensor<T>& d_output) {
  require(input.shape() == d_output.shape(), ErrorCode::ShapeMismatch, "relu_backward: shape mismatch");
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T{0} ? d_output[i] : T{0};
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  require(logits.rank() == 2, ErrorCode::ShapeMismatch, "softmax: logits must be [N,K]");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  Tensor<T> out(logits.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const T* z = logits.ptr() + n * K;
    const double mx = *std::max_element(z, z + K);
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) sum += std::exp(z[k] - mx);
    for (std::size_t k = 0; k < K; ++k) out[n * K + k] = static_cast<T>(std::exp(z[k] - mx) / sum);
  }
  return out;
}

template <typename T>
LossResult<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require(logits.rank() == 2 && labels.size() == logits.dim(0), ErrorCode::ShapeMismatch,
          "cross_entropy: need one label per logits row");
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  LossResult<T> r{0.0, Tensor<T>(logits.shape())};
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const int y = labels[n];
    require(y >= 0 && static_cast<std::size_t>(y) < K, ErrorCode::InvalidArgument,
            "cross_entropy: label " + std::to_string(y) + " out of range");
    const T* z = logits.ptr() + n * K;
    const double mx = *std::max_element(z, z + K);
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) sum += std::exp(z[k] - mx);
    const double lse = mx + std::log(sum);
    total += lse - z[y];
    for (std::size_t k = 0; k < K; ++k) {
      const double p = std::exp(z[k] - lse);
      r.d_logits[n * K + k] = static_cast<T>((p - (static_cast<std::size_t>(y) == k ? 1.0 : 0.0)) / N);
    }
  }
  r.loss = total / N;
  return r;
}

template <typename T>
DropoutResult<T> dropout(const Tensor<T>& input, double rate, Mode mode, std::mt19937_64& rng) {
  require(rate >= 0.0 && rate < 1.0, ErrorCode::InvalidArgument, "dropout: rate must lie in [0, 1)");
  DropoutResult<T> r{input, std::vector<std::uint8_t>(input.size(), 1)};
  if (mode == Mode::Infer || rate == 0.0) return r;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double scale = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < input.size(); ++i) {
    if (unit(rng) < rate) {
      r.keep[i] = 0;
      r.output[i] = T{0};
    } else {
      r.output[i] = static_cast<T>(input[i] * scale);
    }
  }
  return r;
}

template <typename T>
Tensor<T> dropout_backward(std::span<const std::uint8_t> keep, double rate, const Tensor<T>& d_output) {
  require(keep.size() == d_output.size(), ErrorCode::ShapeMismatch, "dropout_backward: mask size mismatch");
  Tensor<T> out(d_output.shape());
  const double scale = 1.0 / (1.0 - rate);
  for (std::size_t i = 0; i < keep.size(); ++i) out[i] = keep[i] ? static_cast<T>(d_output[i] * scale) : T{0};
  return out;
}

std::vector<double> numerical_gradient(const ScalarFunction& f, std::vector<double> params, double eps) {
  std::vector<double> grad(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double orig = params[i];
    params[i] = orig + eps;
    const double up = f(params);
    params[i] = orig - eps;
    const double down = f(params);
    params[i] = orig;
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

double relative_error(std::span<const double> a, std::span<const double> b, double floor) {
  require(a.size() == b.size(), ErrorCode::ShapeMismatch, "relative_error: length mismatch");
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nb), floor});
  if (std::sqrt(na) < floor && std::sqrt(nb) < floor) return 0.0;
  return std::sqrt(diff) / denom;
}

#define VOXLRP_INSTANTIATE(T)                                                                                \
  template Tensor<T> conv3d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                          \
  template LayerGrads<T> conv3d_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, bool);       \
  template Tensor<T> conv3d_input_grad(const Tensor<T>&, const Tensor<T>&);                                 \
  template PoolResult<T> maxpool3d(const Tensor<T>&);                                                        \
  template Tensor<T> maxpool3d_backward(const Shape&, std::span<const std::size_t>, const Tensor<T>&);      \
  template BatchNormResult<T> batchnorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Mode,          \
                                        const Tensor<T>&, const Tensor<T>&, BatchNormOptions);              \
  template LayerGrads<T> batchnorm_backward(const BatchNormResult<T>&, const Tensor<T>&, const Tensor<T>&); \
  template Tensor<T> dense(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                           \
  template LayerGrads<T> dense_backward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> relu(const Tensor<T>&);                                                                 \
  template Tensor<T> relu_backward(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> softmax(const Tensor<T>&);                                                              \
  template LossResult<T> cross_entropy(const Tensor<T>&, std::span<const int>);                             \
  template DropoutResult<T> dropout(const Tensor<T>&, double, Mode, std::mt19937_64&);                      \
  template Tensor<T> dropout_backward(std::span<const std::uint8_t>, double, const Tensor<T>&);

VOXLRP_INSTANTIATE(float)
VOXLRP_INSTANTIATE(double)

#undef VOXLRP_INSTANTIATE

}  // namespace voxlrp
