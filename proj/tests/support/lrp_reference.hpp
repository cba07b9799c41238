#pragma once

// Connection-by-connection alpha-beta propagation over a canonical (folded)
// model, written against the loop oracles only.

#include <cmath>
#include <vector>

#include "support.hpp"
#include "voxlrp/lrp.hpp"
#include "voxlrp/model.hpp"

namespace testing {

struct ReferenceLayer {
  double upper = 0.0, lower = 0.0, absorbed = 0.0;
};

struct ReferenceLrp {
  double logit = 0.0;
  std::vector<double> map;
  std::vector<ReferenceLayer> layers;  // output side first, same order as the engine
};

inline double stab(double z, double eps) { return std::abs(z) >= eps ? z : (z < 0 ? -eps : eps); }

inline ReferenceLrp reference_lrp(const voxlrp::TrainedModel& canonical, const voxlrp::Volume3D& v, int target,
                                  const voxlrp::LrpConfig& cfg) {
  const auto& spec = canonical.spec;
  const auto w = canonical.weights.cast<double>();
  const auto d = v.dims();
  TensorD x({1, 1, d.nz, d.ny, d.nx});
  for (std::size_t i = 0; i < v.size(); ++i) x[i] = v[i];

  std::vector<TensorD> block_in;
  std::vector<PoolOracle> pools;
  for (int b = 0; b < spec.n_blocks; ++b) {
    block_in.push_back(x);
    const TensorD conv = conv3d_oracle(x, w.conv_w[std::size_t(b)], w.conv_b[std::size_t(b)]);
    pools.push_back(maxpool_oracle(conv));
    x = pools.back().output;
    for (auto& e : x.data()) e = std::max(e, 0.0);
  }
  std::vector<std::vector<double>> fc_in;
  std::vector<double> h(x.data().begin(), x.data().end());
  for (int i = 0; i < spec.n_fc_layers; ++i) {
    fc_in.push_back(h);
    const auto& W = w.fc_w[std::size_t(i)];
    const std::size_t D = W.dim(0), K = W.dim(1);
    std::vector<double> z(K);
    for (std::size_t k = 0; k < K; ++k) {
      double acc = w.fc_b[std::size_t(i)][k];
      for (std::size_t j = 0; j < D; ++j) acc += h[j] * W[j * K + k];
      z[k] = i + 1 == spec.n_fc_layers ? acc : std::max(acc, 0.0);
    }
    h = z;
  }

  ReferenceLrp out;
  out.logit = h[std::size_t(target)];
  std::vector<double> rel(h.size(), 0.0);
  rel[std::size_t(target)] = cfg.seed_scale * out.logit;
  auto sum = [](const std::vector<double>& r) {
    double s = 0;
    for (double e : r) s += e;
    return s;
  };

  for (int i = spec.n_fc_layers; i-- > 0;) {
    const auto& W = w.fc_w[std::size_t(i)];
    const auto& in = fc_in[std::size_t(i)];
    const std::size_t D = W.dim(0), K = W.dim(1);
    std::vector<double> lower(D, 0.0);
    ReferenceLayer L{sum(rel), 0, 0};
    for (std::size_t k = 0; k < K; ++k) {
      double zp = 0, zn = 0;
      for (std::size_t j = 0; j < D; ++j) {
        const double c = in[j] * W[j * K + k];
        (c > 0 ? zp : zn) += c;
      }
      const double sp = stab(zp, cfg.epsilon), sn = stab(zn, cfg.epsilon);
      for (std::size_t j = 0; j < D; ++j) {
        const double c = in[j] * W[j * K + k];
        lower[j] += (c > 0 ? cfg.alpha * c / sp : -cfg.beta * c / sn) * rel[k];
      }
      L.absorbed += rel[k] * (1.0 - (cfg.alpha * zp / sp - cfg.beta * zn / sn));
    }
    rel = lower;
    L.lower = sum(rel);
    out.layers.push_back(L);
  }

  for (int b = spec.n_blocks; b-- > 0;) {
    const auto& pool = pools[std::size_t(b)];
    const auto& in = block_in[std::size_t(b)];
    const auto& K = w.conv_w[std::size_t(b)];
    const std::size_t C = in.dim(1), A = in.dim(2), B = in.dim(3), D = in.dim(4), F = K.dim(0);
    std::vector<double> at_conv(F * A * B * D, 0.0);
    for (std::size_t i = 0; i < pool.argmax.size(); ++i) at_conv[pool.argmax[i]] += rel[i];
    out.layers.push_back({sum(rel), sum(at_conv), 0.0});

    std::vector<double> lower(in.size(), 0.0);
    ReferenceLayer L{sum(at_conv), 0, 0};
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t a = 0; a < A; ++a)
        for (std::size_t bb = 0; bb < B; ++bb)
          for (std::size_t dd = 0; dd < D; ++dd) {
            const double Rj = at_conv[((f * A + a) * B + bb) * D + dd];
            if (Rj == 0.0) continue;
            std::vector<std::pair<std::size_t, double>> taps;
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t ka = 0; ka < 3; ++ka)
                for (std::size_t kb = 0; kb < 3; ++kb)
                  for (std::size_t kd = 0; kd < 3; ++kd) {
                    const long ia = long(a + ka) - 1, ib = long(bb + kb) - 1, id = long(dd + kd) - 1;
                    if (ia < 0 || ib < 0 || id < 0 || ia >= long(A) || ib >= long(B) || id >= long(D)) continue;
                    const std::size_t xi = ((c * A + std::size_t(ia)) * B + std::size_t(ib)) * D + std::size_t(id);
                    taps.emplace_back(xi, in[xi] * K[(((f * C + c) * 3 + ka) * 3 + kb) * 3 + kd]);
                  }
            double zp = 0, zn = 0;
            for (const auto& [xi, c] : taps) (c > 0 ? zp : zn) += c;
            const double sp = stab(zp, cfg.epsilon), sn = stab(zn, cfg.epsilon);
            for (const auto& [xi, c] : taps) lower[xi] += (c > 0 ? cfg.alpha * c / sp : -cfg.beta * c / sn) * Rj;
            L.absorbed += Rj * (1.0 - (cfg.alpha * zp / sp - cfg.beta * zn / sn));
          }
    rel = lower;
    L.lower = sum(rel);
    out.layers.push_back(L);
  }
  out.map = rel;
  return out;
}

// Random trained-looking model. Bias-free means every folded bias is zero:
// conv and dense biases zero, batch norm with beta 0 and running mean 0.
inline voxlrp::TrainedModel random_model(int blocks, int filters, voxlrp::Dims dims, int fc_layers,
                                         std::uint64_t seed, bool with_bias) {
  voxlrp::ModelSpec s;
  s.n_blocks = blocks;
  s.filters = filters;
  s.n_fc_layers = fc_layers;
  s.input_dims = dims;
  auto m = voxlrp::build_model(s, seed);
  std::mt19937_64 rng(seed ^ 0x5eed);
  std::uniform_real_distribution<float> u(-0.5f, 0.5f), pos(0.5f, 1.5f);
  auto& w = m.weights;
  for (std::size_t b = 0; b < w.conv_w.size(); ++b) {
    for (auto& v : w.bn_gamma[b].data()) v = pos(rng);
    for (auto& v : w.bn_var[b].data()) v = pos(rng);
    if (with_bias) {
      for (auto& v : w.conv_b[b].data()) v = u(rng);
      for (auto& v : w.bn_beta[b].data()) v = u(rng);
      for (auto& v : w.bn_mean[b].data()) v = u(rng);
    }
  }
  if (with_bias)
    for (auto& t : w.fc_b)
      for (auto& v : t.data()) v = u(rng);
  return m;
}

inline voxlrp::Volume3D random_input(voxlrp::Dims d, std::uint64_t seed, bool nonnegative) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(nonnegative ? 0.0f : -1.0f, 1.0f);
  voxlrp::Volume3D v(d);
  for (float& x : v.values()) x = u(rng);
  return v;
}

}  // namespace testing
