#include "voxlrp/lrp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "voxlrp/error.hpp"

namespace voxlrp {

using nlohmann::json;

void LrpConfig::validate() const {
  require(alpha >= 0.0 && beta >= 0.0, ErrorCode::InvalidArgument, "lrp: alpha and beta must be nonnegative");
  require(std::abs(alpha - beta - 1.0) < 1e-12, ErrorCode::InvalidArgument, "lrp: alpha - beta must equal 1");
  require(epsilon > 0.0, ErrorCode::InvalidArgument, "lrp: epsilon must be positive");
}

double RelevanceMap::sum() const { return std::accumulate(values.begin(), values.end(), 0.0); }
double RelevanceMap::min() const { return values.empty() ? 0.0 : *std::min_element(values.begin(), values.end()); }
double RelevanceMap::max() const { return values.empty() ? 0.0 : *std::max_element(values.begin(), values.end()); }

Volume3D RelevanceMap::to_volume() const {
  Volume3D v(dims);
  for (std::size_t i = 0; i < values.size(); ++i) v[i] = static_cast<float>(values[i]);
  return v;
}

TrainedModel canonicalize(const TrainedModel& model) {
  if (model.bn_folded) return model;
  TrainedModel out = model;
  auto& w = out.weights;
  const double eps = BatchNormOptions{}.eps;
  for (std::size_t b = 0; b < w.conv_w.size(); ++b) {
    const std::size_t F = w.conv_w[b].dim(0);
    const std::size_t per = w.conv_w[b].size() / F;
    for (std::size_t f = 0; f < F; ++f) {
      const double s = static_cast<double>(w.bn_gamma[b][f]) / std::sqrt(static_cast<double>(w.bn_var[b][f]) + eps);
      for (std::size_t i = 0; i < per; ++i) {
        float& v = w.conv_w[b][f * per + i];
        v = static_cast<float>(static_cast<double>(v) * s);
      }
      w.conv_b[b][f] = static_cast<float>((static_cast<double>(w.conv_b[b][f]) - w.bn_mean[b][f]) * s +
                                          static_cast<double>(w.bn_beta[b][f]));
      w.bn_gamma[b][f] = 1.0f;
      w.bn_beta[b][f] = 0.0f;
      w.bn_mean[b][f] = 0.0f;
      w.bn_var[b][f] = 1.0f;
    }
  }
  out.bn_folded = true;
  return out;
}

namespace {

double stabilize(double z, double eps) {
  if (std::abs(z) >= eps) return z;
  return z < 0.0 ? -eps : eps;
}

TensorD positive_part(const TensorD& t) {
  TensorD out = t;
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return out;
}

TensorD negative_part(const TensorD& t) {
  TensorD out = t;
  for (double& v : out.data()) v = v < 0.0 ? v : 0.0;
  return out;
}

bool any_negative(const TensorD& t) {
  return std::any_of(t.data().begin(), t.data().end(), [](double v) { return v < 0.0; });
}

void add_into(TensorD& acc, const TensorD& t) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += t[i];
}

}  // namespace

LayerRuleResult lrp_dense(std::span<const double> x, std::span<const double> weights, std::span<const double> upper,
                          const LrpConfig& config) {
  const std::size_t D = x.size(), K = upper.size();
  require(weights.size() == D * K, ErrorCode::ShapeMismatch, "lrp_dense: weights must be [D, K]");
  std::vector<double> zp(K, 0.0), zn(K, 0.0);
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t k = 0; k < K; ++k) {
      const double c = x[d] * weights[d * K + k];
      (c > 0.0 ? zp[k] : zn[k]) += c;
    }
  std::vector<double> sp(K), sn(K);
  LayerRuleResult r{std::vector<double>(D, 0.0), 0.0};
  for (std::size_t k = 0; k < K; ++k) {
    const double dp = stabilize(zp[k], config.epsilon);
    const double dn = stabilize(zn[k], config.epsilon);
    sp[k] = config.alpha * upper[k] / dp;
    sn[k] = config.beta == 0.0 ? 0.0 : -config.beta * upper[k] / dn;
    const double kept = config.alpha * zp[k] / dp - (config.beta == 0.0 ? 0.0 : config.beta * zn[k] / dn);
    r.absorbed += upper[k] * (1.0 - kept);
  }
  for (std::size_t d = 0; d < D; ++d) {
    double acc = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double c = x[d] * weights[d * K + k];
      acc += c * (c > 0.0 ? sp[k] : sn[k]);
    }
    r.lower[d] = acc;
  }
  return r;
}

LayerRuleResult lrp_conv(const TensorD& x, const TensorD& kernels, const TensorD& upper, const LrpConfig& config) {
  require(x.rank() == 5 && x.dim(0) == 1, ErrorCode::ShapeMismatch, "lrp_conv: input must be [1,C,A,B,D]");
  const std::size_t F = kernels.dim(0);
  require(upper.shape() == Shape({1, F, x.dim(2), x.dim(3), x.dim(4)}), ErrorCode::ShapeMismatch,
          "lrp_conv: relevance shape does not match the layer output");
  const TensorD zero_bias({F});
  const TensorD xp = positive_part(x), wp = positive_part(kernels), wn = negative_part(kernels);
  const bool signed_input = any_negative(x);
  const TensorD xn = signed_input ? negative_part(x) : TensorD();
  const bool use_beta = config.beta != 0.0;

  // z+ = conv(x+, w+) + conv(x-, w-);  z- = conv(x+, w-) + conv(x-, w+)
  TensorD zp = conv3d(xp, wp, zero_bias);
  if (signed_input) add_into(zp, conv3d(xn, wn, zero_bias));
  TensorD zn;
  if (use_beta) {
    zn = conv3d(xp, wn, zero_bias);
    if (signed_input) add_into(zn, conv3d(xn, wp, zero_bias));
  }

  TensorD sp(upper.shape()), sn(upper.shape());
  LayerRuleResult r;
  for (std::size_t j = 0; j < upper.size(); ++j) {
    const double dp = stabilize(zp[j], config.epsilon);
    sp[j] = config.alpha * upper[j] / dp;
    double kept = config.alpha * zp[j] / dp;
    if (use_beta) {
      const double dn = stabilize(zn[j], config.epsilon);
      sn[j] = -config.beta * upper[j] / dn;
      kept -= config.beta * zn[j] / dn;
    }
    r.absorbed += upper[j] * (1.0 - kept);
  }

  // R = x+ (T(s+, w+) + T(s-, w-)) + x- (T(s+, w-) + T(s-, w+))
  TensorD gp = conv3d_input_grad(wp, sp);
  if (use_beta) add_into(gp, conv3d_input_grad(wn, sn));
  TensorD gn;
  if (signed_input) {
    gn = conv3d_input_grad(wn, sp);
    if (use_beta) add_into(gn, conv3d_input_grad(wp, sn));
  }
  r.lower.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    r.lower[i] = xp[i] * gp[i] + (signed_input ? xn[i] * gn[i] : 0.0);
  }
  return r;
}

namespace {

struct Propagation {
  double logit = 0.0;
  double seed = 0.0;
  std::vector<double> input_relevance;
  std::vector<LayerRelevance> layers;
};

double total(std::span<const double> v) { return std::accumulate(v.begin(), v.end(), 0.0); }

Propagation propagate(const TrainedModel& canonical, const Volume3D& input, int target_class, const LrpConfig& cfg) {
  const ModelSpec& spec = canonical.spec;
  require(input.dims() == spec.input_dims, ErrorCode::DimMismatch,
          "lrp: input dims " + to_string(input.dims()) + " differ from model input " + to_string(spec.input_dims));
  require(target_class >= 0 && target_class < spec.n_classes, ErrorCode::InvalidArgument,
          "lrp: target class " + std::to_string(target_class) + " out of range");
  const Weights<double> w = canonical.weights.cast<double>();
  const TensorD batch = volumes_to_batch({&input}).cast<double>();
  const ForwardCache<double> c = forward(spec, w, true, batch, Mode::Infer, nullptr);

  Propagation p;
  p.logit = c.logits[static_cast<std::size_t>(target_class)];
  p.seed = cfg.seed_scale * p.logit;
  std::vector<double> rel(static_cast<std::size_t>(spec.n_classes), 0.0);
  rel[static_cast<std::size_t>(target_class)] = p.seed;

  for (int i = spec.n_fc_layers; i-- > 0;) {
    const auto& x = c.fc_inputs[static_cast<std::size_t>(i)];
    auto r = lrp_dense(x.data(), w.fc_w[static_cast<std::size_t>(i)].data(), rel, cfg);
    const double upper = total(rel);
    rel = std::move(r.lower);
    p.layers.push_back({"dense" + std::to_string(i + 1), upper, total(rel), r.absorbed});
  }
  for (int b = spec.n_blocks; b-- > 0;) {
    const auto& bc = c.blocks[static_cast<std::size_t>(b)];
    const std::string tag = std::to_string(b + 1);
    // Relevance above the pool equals relevance at the pool output: relu and
    // inference-mode dropout pass it through unchanged.
    std::vector<double> at_conv(bc.conv_out.size(), 0.0);
    for (std::size_t i = 0; i < bc.argmax.size(); ++i) at_conv[bc.argmax[i]] += rel[i];
    const double pool_upper = total(rel);
    const double pool_lower = total(at_conv);
    p.layers.push_back({"maxpool" + tag, pool_upper, pool_lower, 0.0});
    const TensorD upper(bc.conv_out.shape(), std::move(at_conv));
    auto r = lrp_conv(bc.input, w.conv_w[static_cast<std::size_t>(b)], upper, cfg);
    rel = std::move(r.lower);
    p.layers.push_back({"conv" + tag, pool_lower, total(rel), r.absorbed});
  }
  p.input_relevance = std::move(rel);
  return p;
}

}  // namespace

RelevanceMap lrp_relevance(const TrainedModel& model, const Volume3D& input, int target_class,
                           const LrpConfig& config) {
  config.validate();
  const TrainedModel canonical = canonicalize(model);
  Propagation p = propagate(canonical, input, target_class, config);
  RelevanceMap m;
  m.target_class = target_class;
  m.logit = p.logit;
  m.dims = input.dims();
  m.values = std::move(p.input_relevance);
  m.layers = std::move(p.layers);
  m.config = config;
  return m;
}

ConservationReport conservation_report(const TrainedModel& model, const Volume3D& input, const RelevanceMap& map) {
  const TrainedModel canonical = canonicalize(model);
  const Propagation p = propagate(canonical, input, map.target_class, map.config);
  ConservationReport r;
  r.logit = p.logit;
  r.seed = p.seed;
  r.input_total = total(p.input_relevance);
  r.layers = p.layers;
  for (const auto& l : r.layers) {
    const double scale = std::max(std::abs(l.upper), 1e-300);
    if (std::abs(l.lower - l.upper) > 1e-3 * scale) r.flagged.push_back(l.layer);
  }
  const double ms = map.sum();
  r.map_matches = std::abs(ms - r.input_total) <= 1e-6 * std::max({std::abs(ms), std::abs(r.input_total), 1e-12});
  return r;
}

RelevanceMap scale_map(const RelevanceMap& map, double lo, double hi) {
  require(hi > lo, ErrorCode::InvalidArgument, "scale_map: hi must exceed lo");
  RelevanceMap out = map;
  const double mn = map.min(), mx = map.max();
  for (double& v : out.values) v = mx > mn ? lo + (v - mn) * (hi - lo) / (mx - mn) : lo;
  return out;
}

std::size_t top_percentile_count(std::size_t n, double p) {
  require(p > 0.0 && p <= 100.0, ErrorCode::InvalidArgument, "threshold_top_percentile: p must lie in (0, 100]");
  const double exact = p * static_cast<double>(n) / 100.0;
  auto k = static_cast<std::size_t>(std::ceil(exact));
  // Absorb representation error so that e.g. 30% of 10 keeps 3, not 4.
  if (k > 0 && static_cast<double>(k - 1) >= exact - 1e-9 * std::max(1.0, exact)) --k;
  return std::min(k, n);
}

RelevanceMap threshold_top_percentile(const RelevanceMap& map, double p) {
  const std::size_t n = map.values.size();
  const std::size_t keep = top_percentile_count(n, p);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return map.values[a] > map.values[b]; });
  RelevanceMap out = map;
  std::fill(out.values.begin(), out.values.end(), 0.0);
  for (std::size_t i = 0; i < keep; ++i) out.values[order[i]] = map.values[order[i]];
  return out;
}

BinaryMask binarize_positive(std::span<const double> values, Dims dims) {
  require(values.size() == dims.voxel_count(), ErrorCode::ShapeMismatch, "binarize_positive: size mismatch");
  BinaryMask m(dims);
  for (std::size_t i = 0; i < values.size(); ++i) m.set(i, values[i] > 0.0);
  return m;
}

BinaryMask binarize_positive(const RelevanceMap& map) { return binarize_positive(map.values, map.dims); }

BinaryMask filter_clusters(const BinaryMask& mask, std::size_t min_size) {
  require(min_size >= 1, ErrorCode::InvalidArgument, "filter_clusters: min_size must be at least 1");
  const Dims d = mask.dims();
  const std::size_t n = mask.size();
  BinaryMask out(d);
  std::vector<std::uint8_t> seen(n, 0);
  std::vector<std::size_t> component, stack;
  for (std::size_t start = 0; start < n; ++start) {
    if (!mask[start] || seen[start]) continue;
    component.clear();
    stack.assign(1, start);
    seen[start] = 1;
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      component.push_back(i);
      const long x = static_cast<long>(i % d.nx);
      const long y = static_cast<long>((i / d.nx) % d.ny);
      const long z = static_cast<long>(i / (std::size_t{d.nx} * d.ny));
      for (long dz = -1; dz <= 1; ++dz)
        for (long dy = -1; dy <= 1; ++dy)
          for (long dx = -1; dx <= 1; ++dx) {
            const long X = x + dx, Y = y + dy, Z = z + dz;
            if (X < 0 || Y < 0 || Z < 0 || X >= static_cast<long>(d.nx) || Y >= static_cast<long>(d.ny) ||
                Z >= static_cast<long>(d.nz))
              continue;
            const std::size_t j = static_cast<std::size_t>(X) + d.nx * (static_cast<std::size_t>(Y) +
                                                                         d.ny * static_cast<std::size_t>(Z));
            if (mask[j] && !seen[j]) {
              seen[j] = 1;
              stack.push_back(j);
            }
          }
    }
    if (component.size() >= min_size) {
      for (std::size_t i : component) out.set(i, true);
    }
  }
  return out;
}

namespace {

template <typename Get>
std::vector<double> histogram(Dims d, Axis axis, Get get) {
  std::vector<double> h(d.extent(static_cast<int>(axis)), 0.0);
  std::size_t i = 0;
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      for (std::size_t x = 0; x < d.nx; ++x, ++i) {
        const std::size_t s = axis == Axis::Sagittal ? x : axis == Axis::Coronal ? y : z;
        h[s] += get(i);
      }
  return h;
}

}  // namespace

std::vector<double> slice_histogram(const RelevanceMap& map, Axis axis) {
  return histogram(map.dims, axis, [&](std::size_t i) { return map.values[i]; });
}

std::vector<double> slice_histogram(const Volume3D& v, Axis axis) {
  return histogram(v.dims(), axis, [&](std::size_t i) { return static_cast<double>(v[i]); });
}

void save_relevance_map(const RelevanceMap& map, const std::filesystem::path& path) {
  write_volume(map.to_volume(), path);
  json layers = json::array();
  for (const auto& l : map.layers) {
    layers.push_back({{"layer", l.layer}, {"upper", l.upper}, {"lower", l.lower}, {"absorbed", l.absorbed}});
  }
  const json side{{"subject", map.subject_id},
                  {"model", map.model_id},
                  {"target_class", map.target_class},
                  {"logit", map.logit},
                  {"min", map.min()},
                  {"max", map.max()},
                  {"sum", map.sum()},
                  {"alpha", map.config.alpha},
                  {"beta", map.config.beta},
                  {"epsilon", map.config.epsilon},
                  {"layers", layers}};
  write_text_file(path.string() + ".json", side.dump(2) + "\n");
}

RelevanceMap load_relevance_map(const std::filesystem::path& path) {
  const Volume3D v = read_volume(path);
  RelevanceMap m;
  m.dims = v.dims();
  m.values.assign(v.values().begin(), v.values().end());
  try {
    const json side = json::parse(read_text_file(path.string() + ".json"));
    m.subject_id = side.at("subject").get<std::string>();
    m.model_id = side.at("model").get<std::string>();
    m.target_class = side.at("target_class").get<int>();
    m.logit = side.at("logit").get<double>();
    m.config.alpha = side.at("alpha").get<double>();
    m.config.beta = side.at("beta").get<double>();
    m.config.epsilon = side.at("epsilon").get<double>();
    for (const auto& l : side.at("layers")) {
      m.layers.push_back({l.at("layer").get<std::string>(), l.at("upper").get<double>(), l.at("lower").get<double>(),
                          l.at("absorbed").get<double>()});
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::Schema, "relevance map sidecar " + path.string() + ": " + e.what());
  }
  return m;
}

}  // namespace voxlrp
