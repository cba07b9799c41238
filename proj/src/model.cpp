#include "voxlrp/model.hpp"

#include <cmath>
#include <cstring>

#include "voxlrp/error.hpp"

namespace voxlrp {

using nlohmann::json;

std::string to_string(DropoutPlacement p) {
  return p == DropoutPlacement::AfterEachBlock ? "after_each_block" : "after_all_blocks";
}

DropoutPlacement parse_dropout_placement(const std::string& s) {
  if (s == "after_each_block") return DropoutPlacement::AfterEachBlock;
  if (s == "after_all_blocks") return DropoutPlacement::AfterAllBlocks;
  fail(ErrorCode::Schema, "dropout_placement must be after_each_block or after_all_blocks, got '" + s + "'");
}

// --- spec ------------------------------------------------------------------------

void ModelSpec::validate() const {
  require(n_blocks >= 1 && n_blocks <= 5, ErrorCode::InvalidArgument, "model: n_blocks must be in 1..5");
  require(filters >= 1, ErrorCode::InvalidArgument, "model: filters must be positive");
  require(dropout_rate >= 0.0 && dropout_rate < 1.0, ErrorCode::InvalidArgument,
          "model: dropout_rate must lie in [0, 1)");
  require(n_fc_layers >= 1 && n_fc_layers <= 3, ErrorCode::InvalidArgument, "model: n_fc_layers must be in 1..3");
  require(n_classes >= 2, ErrorCode::InvalidArgument, "model: n_classes must be at least 2");
  require(input_dims.voxel_count() > 0, ErrorCode::InvalidArgument, "model: input dims must be positive");
  const std::size_t div = std::size_t{1} << n_blocks;
  require(input_dims.nx >= div && input_dims.ny >= div && input_dims.nz >= div, ErrorCode::ShapeMismatch,
          "model: input " + to_string(input_dims) + " collapses to zero after " + std::to_string(n_blocks) +
              " pooling stages");
}

Shape ModelSpec::input_shape() const { return {1, input_dims.nz, input_dims.ny, input_dims.nx}; }

std::array<std::size_t, 3> ModelSpec::extents_after(int block) const {
  std::array<std::size_t, 3> e{input_dims.nz, input_dims.ny, input_dims.nx};
  for (int b = 0; b <= block; ++b)
    for (auto& v : e) v /= 2;
  return e;
}

std::size_t ModelSpec::flatten_width() const {
  const auto e = extents_after(n_blocks - 1);
  return e[0] * e[1] * e[2] * static_cast<std::size_t>(filters);
}

json spec_to_json(const ModelSpec& s) {
  return json{{"n_blocks", s.n_blocks},
              {"filters", s.filters},
              {"dropout_placement", to_string(s.dropout_placement)},
              {"dropout_rate", s.dropout_rate},
              {"n_fc_layers", s.n_fc_layers},
              {"n_classes", s.n_classes},
              {"input_dims", {s.input_dims.nx, s.input_dims.ny, s.input_dims.nz}}};
}

ModelSpec spec_from_json(const json& j) {
  ModelSpec s;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "n_blocks") s.n_blocks = value.get<int>();
      else if (key == "filters") s.filters = value.get<int>();
      else if (key == "dropout_placement") s.dropout_placement = parse_dropout_placement(value.get<std::string>());
      else if (key == "dropout_rate") s.dropout_rate = value.get<double>();
      else if (key == "n_fc_layers") s.n_fc_layers = value.get<int>();
      else if (key == "n_classes") s.n_classes = value.get<int>();
      else if (key == "input_dims") {
        require(value.is_array() && value.size() == 3, ErrorCode::Schema, "model: input_dims must be [nx, ny, nz]");
        s.input_dims = {value[0].get<std::uint32_t>(), value[1].get<std::uint32_t>(), value[2].get<std::uint32_t>()};
      } else {
        fail(ErrorCode::Schema, "model: unknown key '" + key + "'");
      }
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::Schema, std::string("model spec: ") + e.what());
  }
  s.validate();
  return s;
}

// --- weights ----------------------------------------------------------------------

template <typename T>
std::vector<Tensor<T>*> Weights<T>::trainable() {
  std::vector<Tensor<T>*> out;
  for (std::size_t b = 0; b < conv_w.size(); ++b) {
    out.insert(out.end(), {&conv_w[b], &conv_b[b], &bn_gamma[b], &bn_beta[b]});
  }
  for (std::size_t i = 0; i < fc_w.size(); ++i) out.insert(out.end(), {&fc_w[i], &fc_b[i]});
  return out;
}

template <typename T>
std::vector<const Tensor<T>*> Weights<T>::trainable() const {
  auto mut = const_cast<Weights<T>*>(this)->trainable();
  return {mut.begin(), mut.end()};
}

template <typename T>
std::vector<std::string> Weights<T>::trainable_names() const {
  std::vector<std::string> out;
  for (std::size_t b = 0; b < conv_w.size(); ++b) {
    const std::string i = std::to_string(b);
    out.insert(out.end(), {"conv" + i + ".weight", "conv" + i + ".bias", "bn" + i + ".gamma", "bn" + i + ".beta"});
  }
  for (std::size_t k = 0; k < fc_w.size(); ++k) {
    const std::string i = std::to_string(k);
    out.insert(out.end(), {"fc" + i + ".weight", "fc" + i + ".bias"});
  }
  return out;
}

template <typename T>
template <typename U>
Weights<U> Weights<T>::cast() const {
  auto conv = [](const std::vector<Tensor<T>>& v) {
    std::vector<Tensor<U>> out;
    for (const auto& t : v) out.push_back(t.template cast<U>());
    return out;
  };
  return Weights<U>{conv(conv_w), conv(conv_b), conv(bn_gamma), conv(bn_beta),
                    conv(bn_mean), conv(bn_var),  conv(fc_w),   conv(fc_b)};
}

template struct Weights<float>;
template struct Weights<double>;
template Weights<double> Weights<float>::cast<double>() const;
template Weights<float> Weights<double>::cast<float>() const;
template Weights<float> Weights<float>::cast<float>() const;
template Weights<double> Weights<double>::cast<double>() const;

TrainedModel build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  TrainedModel m;
  m.spec = spec;
  std::mt19937_64 rng(seed);
  auto he = [&](Tensor<float>& t, std::size_t fan_in) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-limit, limit);
    for (float& v : t.data()) v = static_cast<float>(u(rng));
  };
  const std::size_t F = static_cast<std::size_t>(spec.filters);
  auto& w = m.weights;
  for (int b = 0; b < spec.n_blocks; ++b) {
    const std::size_t C = b == 0 ? 1 : F;
    w.conv_w.emplace_back(Shape{F, C, 3, 3, 3});
    he(w.conv_w.back(), 27 * C);
    w.conv_b.emplace_back(Shape{F});
    w.bn_gamma.emplace_back(Shape{F}, 1.0f);
    w.bn_beta.emplace_back(Shape{F});
    w.bn_mean.emplace_back(Shape{F});
    w.bn_var.emplace_back(Shape{F}, 1.0f);
  }
  const std::size_t D = spec.flatten_width();
  for (int i = 0; i < spec.n_fc_layers; ++i) {
    const std::size_t K = i + 1 == spec.n_fc_layers ? static_cast<std::size_t>(spec.n_classes) : D;
    w.fc_w.emplace_back(Shape{D, K});
    he(w.fc_w.back(), D);
    w.fc_b.emplace_back(Shape{K});
  }
  m.train_meta = json{{"init", "he_uniform"}, {"init_seed", seed}};
  return m;
}

ParameterCount count_parameters(const ModelSpec& spec) {
  spec.validate();
  ParameterCount pc;
  const std::size_t F = static_cast<std::size_t>(spec.filters);
  for (int b = 0; b < spec.n_blocks; ++b) {
    const std::size_t C = b == 0 ? 1 : F;
    const std::string i = std::to_string(b + 1);
    pc.layers.push_back({"conv" + i, F * 27 * C + F, 0});
    pc.layers.push_back({"batchnorm" + i, 2 * F, 2 * F});
  }
  const std::size_t D = spec.flatten_width();
  for (int i = 0; i < spec.n_fc_layers; ++i) {
    const std::size_t K = i + 1 == spec.n_fc_layers ? static_cast<std::size_t>(spec.n_classes) : D;
    pc.layers.push_back({"dense" + std::to_string(i + 1), D * K + K, 0});
  }
  for (const auto& l : pc.layers) {
    pc.trainable += l.trainable;
    pc.non_trainable += l.non_trainable;
  }
  return pc;
}

ParameterCount count_allocated(const Weights<float>& w) {
  ParameterCount pc;
  for (std::size_t b = 0; b < w.conv_w.size(); ++b) {
    const std::string i = std::to_string(b + 1);
    pc.layers.push_back({"conv" + i, w.conv_w[b].size() + w.conv_b[b].size(), 0});
    pc.layers.push_back({"batchnorm" + i, w.bn_gamma[b].size() + w.bn_beta[b].size(),
                         w.bn_mean[b].size() + w.bn_var[b].size()});
  }
  for (std::size_t k = 0; k < w.fc_w.size(); ++k) {
    pc.layers.push_back({"dense" + std::to_string(k + 1), w.fc_w[k].size() + w.fc_b[k].size(), 0});
  }
  for (const auto& l : pc.layers) {
    pc.trainable += l.trainable;
    pc.non_trainable += l.non_trainable;
  }
  return pc;
}

// --- forward / backward --------------------------------------------------------------

template <typename T>
ForwardCache<T> forward(const ModelSpec& spec, const Weights<T>& w, bool bn_folded, const Tensor<T>& batch,
                        Mode mode, std::mt19937_64* rng) {
  const Shape in = spec.input_shape();
  require(batch.rank() == 5 && Shape(batch.shape().begin() + 1, batch.shape().end()) == in,
          ErrorCode::ShapeMismatch,
          "forward: batch " + shape_to_string(batch.shape()) + " does not match input " + shape_to_string(in));
  require(mode == Mode::Infer || rng != nullptr, ErrorCode::InvalidArgument, "forward: train mode needs an rng");
  const bool drop = mode == Mode::Train && spec.dropout_rate > 0.0;
  ForwardCache<T> c;
  c.mode = mode;
  Tensor<T> x = batch;
  for (int b = 0; b < spec.n_blocks; ++b) {
    BlockCache<T> bc;
    bc.input = std::move(x);
    bc.conv_out = conv3d(bc.input, w.conv_w[b], w.conv_b[b]);
    const Tensor<T>* pre_pool = &bc.conv_out;
    if (!bn_folded) {
      bc.bn = batchnorm(bc.conv_out, w.bn_gamma[b], w.bn_beta[b], mode, w.bn_mean[b], w.bn_var[b]);
      bc.has_bn = true;
      c.degenerate_bn = c.degenerate_bn || bc.bn.degenerate;
      pre_pool = &bc.bn.output;
    }
    auto pool = maxpool3d(*pre_pool);
    bc.pool_out = std::move(pool.output);
    bc.argmax = std::move(pool.argmax);
    bc.relu_out = relu(bc.pool_out);
    const bool last = b + 1 == spec.n_blocks;
    const bool drop_here = drop && (spec.dropout_placement == DropoutPlacement::AfterEachBlock || last);
    if (drop_here) {
      auto d = dropout(bc.relu_out, spec.dropout_rate, mode, *rng);
      bc.output = std::move(d.output);
      if (spec.dropout_placement == DropoutPlacement::AfterEachBlock) bc.keep = std::move(d.keep);
      else c.final_keep = std::move(d.keep);
    } else {
      bc.output = bc.relu_out;
    }
    x = bc.output;
    c.blocks.push_back(std::move(bc));
  }
  const std::size_t N = batch.dim(0);
  Tensor<T> h = x.reshaped({N, spec.flatten_width()});
  for (int i = 0; i < spec.n_fc_layers; ++i) {
    c.fc_inputs.push_back(h);
    Tensor<T> z = dense(h, w.fc_w[i], w.fc_b[i]);
    c.fc_pre.push_back(z);
    h = i + 1 == spec.n_fc_layers ? std::move(z) : relu(z);
  }
  c.logits = std::move(h);
  return c;
}

template <typename T>
Weights<T> backward(const ModelSpec& spec, const Weights<T>& w, const ForwardCache<T>& c, const Tensor<T>& d_logits) {
  require(d_logits.shape() == c.logits.shape(), ErrorCode::ShapeMismatch, "backward: d_logits shape mismatch");
  Weights<T> g;
  const std::size_t nb = static_cast<std::size_t>(spec.n_blocks);
  const std::size_t nf = static_cast<std::size_t>(spec.n_fc_layers);
  g.conv_w.resize(nb);
  g.conv_b.resize(nb);
  g.bn_gamma.resize(nb);
  g.bn_beta.resize(nb);
  g.fc_w.resize(nf);
  g.fc_b.resize(nf);
  for (std::size_t b = 0; b < nb; ++b) {
    const auto& bc = c.blocks[b];
    g.bn_mean.push_back(bc.has_bn ? bc.bn.running_mean : w.bn_mean[b]);
    g.bn_var.push_back(bc.has_bn ? bc.bn.running_var : w.bn_var[b]);
  }

  Tensor<T> d = d_logits;
  for (std::size_t i = nf; i-- > 0;) {
    if (i + 1 < nf) d = relu_backward(c.fc_pre[i], d);
    auto lg = dense_backward(c.fc_inputs[i], w.fc_w[i], d);
    g.fc_w[i] = std::move(lg.d_weights);
    g.fc_b[i] = std::move(lg.d_bias);
    d = std::move(lg.d_input);
  }
  d = d.reshaped(c.blocks.back().output.shape());
  if (!c.final_keep.empty()) d = dropout_backward(c.final_keep, spec.dropout_rate, d);
  for (std::size_t b = nb; b-- > 0;) {
    const auto& bc = c.blocks[b];
    if (!bc.keep.empty()) d = dropout_backward(bc.keep, spec.dropout_rate, d);
    d = relu_backward(bc.pool_out, d);
    d = maxpool3d_backward(bc.conv_out.shape(), bc.argmax, d);
    if (bc.has_bn) {
      auto bg = batchnorm_backward(bc.bn, w.bn_gamma[b], d);
      g.bn_gamma[b] = std::move(bg.d_weights);
      g.bn_beta[b] = std::move(bg.d_bias);
      d = std::move(bg.d_input);
    } else {
      g.bn_gamma[b] = Tensor<T>(w.bn_gamma[b].shape());
      g.bn_beta[b] = Tensor<T>(w.bn_beta[b].shape());
    }
    auto cg = conv3d_backward(bc.input, w.conv_w[b], d, b > 0);
    g.conv_w[b] = std::move(cg.d_weights);
    g.conv_b[b] = std::move(cg.d_bias);
    if (b > 0) d = std::move(cg.d_input);
  }
  return g;
}

template ForwardCache<float> forward(const ModelSpec&, const Weights<float>&, bool, const Tensor<float>&, Mode,
                                     std::mt19937_64*);
template ForwardCache<double> forward(const ModelSpec&, const Weights<double>&, bool, const Tensor<double>&, Mode,
                                      std::mt19937_64*);
template Weights<float> backward(const ModelSpec&, const Weights<float>&, const ForwardCache<float>&,
                                 const Tensor<float>&);
template Weights<double> backward(const ModelSpec&, const Weights<double>&, const ForwardCache<double>&,
                                  const Tensor<double>&);

TensorF volumes_to_batch(const std::vector<const Volume3D*>& volumes) {
  require(!volumes.empty(), ErrorCode::InvalidArgument, "volumes_to_batch: empty batch");
  const Dims d = volumes.front()->dims();
  const std::size_t nvox = d.voxel_count();
  std::vector<float> data(volumes.size() * nvox);
  for (std::size_t i = 0; i < volumes.size(); ++i) {
    require(volumes[i]->dims() == d, ErrorCode::DimMismatch, "volumes_to_batch: volume dims differ");
    std::memcpy(data.data() + i * nvox, volumes[i]->values().data(), nvox * sizeof(float));
  }
  return TensorF({volumes.size(), 1, d.nz, d.ny, d.nx}, std::move(data));
}

std::vector<double> predict_logits(const TrainedModel& model, const Volume3D& v) {
  const auto c = forward(model.spec, model.weights, model.bn_folded, volumes_to_batch({&v}), Mode::Infer, nullptr);
  return {c.logits.data().begin(), c.logits.data().end()};
}

// --- persistence -----------------------------------------------------------------------

namespace {

constexpr char kModelMagic[8] = {'V', 'O', 'X', 'M', '0', '0', '0', '1'};

struct NamedTensor {
  std::string name;
  Tensor<float>* tensor;
};

std::vector<NamedTensor> all_tensors(Weights<float>& w) {
  std::vector<NamedTensor> out;
  for (std::size_t b = 0; b < w.conv_w.size(); ++b) {
    const std::string i = std::to_string(b);
    out.push_back({"conv" + i + ".weight", &w.conv_w[b]});
    out.push_back({"conv" + i + ".bias", &w.conv_b[b]});
    out.push_back({"bn" + i + ".gamma", &w.bn_gamma[b]});
    out.push_back({"bn" + i + ".beta", &w.bn_beta[b]});
    out.push_back({"bn" + i + ".running_mean", &w.bn_mean[b]});
    out.push_back({"bn" + i + ".running_var", &w.bn_var[b]});
  }
  for (std::size_t k = 0; k < w.fc_w.size(); ++k) {
    const std::string i = std::to_string(k);
    out.push_back({"fc" + i + ".weight", &w.fc_w[k]});
    out.push_back({"fc" + i + ".bias", &w.fc_b[k]});
  }
  return out;
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

}  // namespace

std::vector<std::uint8_t> encode_model(const TrainedModel& m) {
  TrainedModel copy = m;
  auto tensors = all_tensors(copy.weights);
  json table = json::array();
  std::size_t offset = 0;
  for (const auto& nt : tensors) {
    table.push_back({{"name", nt.name}, {"shape", nt.tensor->shape()}, {"offset", offset}});
    offset += nt.tensor->size();
  }
  const json header{{"spec", spec_to_json(m.spec)},
                    {"bn_folded", m.bn_folded},
                    {"train_meta", m.train_meta},
                    {"tensors", table}};
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(kModelMagic, kModelMagic + 8);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset * 4);
  for (const auto& nt : tensors) {
    for (float f : nt.tensor->data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(out, bits);
    }
  }
  return out;
}

TrainedModel decode_model(std::span<const std::uint8_t> bytes) {
  require(bytes.size() >= 12, ErrorCode::FormatTruncated, "model: file shorter than its header");
  require(std::memcmp(bytes.data(), kModelMagic, 8) == 0, ErrorCode::FormatBadMagic,
          "model: bad magic or unsupported version");
  std::uint32_t hlen = 0;
  for (int i = 0; i < 4; ++i) hlen |= std::uint32_t{bytes[8 + i]} << (8 * i);
  require(bytes.size() >= 12 + std::size_t{hlen}, ErrorCode::FormatTruncated, "model: header truncated");
  json header;
  try {
    header = json::parse(bytes.begin() + 12, bytes.begin() + 12 + hlen);
  } catch (const json::exception& e) {
    fail(ErrorCode::Integrity, std::string("model: header is not valid JSON: ") + e.what());
  }
  TrainedModel m;
  json table;
  try {
    m.spec = spec_from_json(header.at("spec"));
    m.bn_folded = header.at("bn_folded").get<bool>();
    m.train_meta = header.at("train_meta");
    table = header.at("tensors");
  } catch (const json::exception& e) {
    fail(ErrorCode::Integrity, std::string("model: header incomplete: ") + e.what());
  }
  m.weights = build_model(m.spec, 0).weights;
  auto tensors = all_tensors(m.weights);
  require(table.is_array() && table.size() == tensors.size(), ErrorCode::Integrity,
          "model: tensor table does not match the spec");
  const std::uint8_t* payload = bytes.data() + 12 + hlen;
  const std::size_t payload_len = bytes.size() - 12 - hlen;
  std::size_t expect_offset = 0;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& nt = tensors[i];
    try {
      require(table[i].at("name").get<std::string>() == nt.name, ErrorCode::Integrity,
              "model: tensor " + std::to_string(i) + " should be " + nt.name);
      require(table[i].at("shape").get<Shape>() == nt.tensor->shape(), ErrorCode::Integrity,
              "model: tensor " + nt.name + " shape disagrees with the spec");
      require(table[i].at("offset").get<std::size_t>() == expect_offset, ErrorCode::Integrity,
              "model: tensor " + nt.name + " offset inconsistent");
    } catch (const json::exception& e) {
      fail(ErrorCode::Integrity, std::string("model: tensor table: ") + e.what());
    }
    expect_offset += nt.tensor->size();
  }
  require(payload_len >= expect_offset * 4, ErrorCode::FormatTruncated, "model: tensor payload truncated");
  require(payload_len == expect_offset * 4, ErrorCode::FormatTrailingBytes, "model: trailing bytes after tensors");
  std::size_t pos = 0;
  for (auto& nt : tensors) {
    for (float& f : nt.tensor->data()) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= std::uint32_t{payload[pos + b]} << (8 * b);
      std::memcpy(&f, &bits, 4);
      pos += 4;
    }
  }
  return m;
}

void save_model(const TrainedModel& m, const std::filesystem::path& path) {
  const auto bytes = encode_model(m);
  write_file_bytes(path, bytes);
}

TrainedModel load_model(const std::filesystem::path& path) { return decode_model(read_file_bytes(path)); }

}  // namespace voxlrp
