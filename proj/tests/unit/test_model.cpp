#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include <nlohmann/json.hpp>

#include "support.hpp"
#include "voxlrp/error.hpp"
#include "voxlrp/model.hpp"
#include "voxlrp/pipeline.hpp"

using namespace voxlrp;
using testing::random_tensor;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::Undefined;
}

ModelSpec small_spec(int blocks, int filters, Dims d) {
  ModelSpec s;
  s.n_blocks = blocks;
  s.filters = filters;
  s.input_dims = d;
  return s;
}

// Directional derivative of the training loss against the analytic gradient.
// Dropout masks are fixed by reseeding the rng for every evaluation.
double network_grad_check(const ModelSpec& spec, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Weights<double> w = build_model(spec, seed).weights.cast<double>();
  for (auto* t : w.trainable())
    for (auto& v : t->data()) v += std::uniform_real_distribution<double>(-0.1, 0.1)(rng);
  const std::size_t N = 2;
  const Shape in = spec.input_shape();
  const TensorD batch = random_tensor({N, in[0], in[1], in[2], in[3]}, rng);
  const std::vector<int> labels{0, 1};

  auto loss = [&](const Weights<double>& ww) {
    std::mt19937_64 drng(seed + 7);
    const auto c = forward(spec, ww, false, batch, Mode::Train, &drng);
    return cross_entropy(c.logits, std::span<const int>(labels)).loss;
  };
  std::mt19937_64 drng(seed + 7);
  const auto cache = forward(spec, w, false, batch, Mode::Train, &drng);
  const auto ce = cross_entropy(cache.logits, std::span<const int>(labels));
  const Weights<double> g = backward(spec, w, cache, ce.d_logits);

  // One direction per trainable tensor, several step sizes: the loss is only
  // piecewise smooth, and a step that crosses a pooling or relu switch is
  // retried smaller. Conv biases feeding batch norm have an exactly zero
  // gradient, hence the absolute floor.
  double worst = 0.0;
  const auto gt = g.trainable();
  for (std::size_t t = 0; t < gt.size(); ++t) {
    std::vector<double> u(gt[t]->size());
    double analytic = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
      u[i] = std::normal_distribution<double>()(rng);
      analytic += u[i] * (*gt[t])[i];
    }
    double best = 1e300;
    for (double h : {1e-6, 1e-7, 1e-8}) {
      Weights<double> up = w, down = w;
      auto ut = up.trainable(), dt = down.trainable();
      for (std::size_t i = 0; i < u.size(); ++i) {
        (*ut[t])[i] += h * u[i];
        (*dt[t])[i] -= h * u[i];
      }
      const double numeric = (loss(up) - loss(down)) / (2 * h);
      const double scale = std::max({std::abs(numeric), std::abs(analytic), 1e-3});
      best = std::min(best, std::abs(numeric - analytic) / scale);
      if (best < 1e-6) break;
    }
    worst = std::max(worst, best);
  }
  return worst;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("build is deterministic per seed") {
  const ModelSpec s = small_spec(2, 3, {8, 8, 8});
  CHECK(build_model(s, 4).weights == build_model(s, 4).weights);
  CHECK_FALSE(build_model(s, 4).weights == build_model(s, 5).weights);
}

TEST_CASE("five blocks on 16^3 is rejected") {
  CHECK(code_of([] { build_model(small_spec(5, 5, {16, 16, 16}), 1); }) == ErrorCode::ShapeMismatch);
  CHECK(code_of([] { build_model(small_spec(0, 5, {16, 16, 16}), 1); }) == ErrorCode::InvalidArgument);
  auto s = small_spec(1, 5, {8, 8, 8});
  s.dropout_rate = 1.0;
  CHECK(code_of([&] { s.validate(); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("He-uniform init bounds, zero biases, BN identity") {
  const auto m = build_model(small_spec(2, 4, {8, 8, 8}), 1);
  const double b0 = std::sqrt(6.0 / 27.0), b1 = std::sqrt(6.0 / (27.0 * 4));
  for (float v : m.weights.conv_w[0].data()) CHECK(std::abs(v) <= b0);
  for (float v : m.weights.conv_w[1].data()) CHECK(std::abs(v) <= b1);
  for (float v : m.weights.conv_b[1].data()) CHECK(v == 0.0f);
  for (float v : m.weights.bn_gamma[0].data()) CHECK(v == 1.0f);
  for (float v : m.weights.bn_var[0].data()) CHECK(v == 1.0f);
}

TEST_CASE("hand count: 1 block, 1 filter, 4^3 input, 1 dense layer, 2 classes") {
  const auto pc = count_parameters(small_spec(1, 1, {4, 4, 4}));
  REQUIRE(pc.layers.size() == 3);
  CHECK(pc.layers[0].trainable == 28);
  CHECK(pc.layers[1].trainable == 2);
  CHECK(pc.layers[2].trainable == 18);
  CHECK(pc.trainable == 48);
  CHECK(pc.non_trainable == 2);
}

TEST_CASE("count_parameters equals allocated scalars across the grid") {
  const auto grid = experiment_grid();
  CHECK(grid.size() == 12);
  for (const auto& e : grid) {
    CAPTURE(e.name);
    const auto pc = count_parameters(e.spec);
    const auto al = count_allocated(build_model(e.spec, 1).weights);
    CHECK(pc.trainable == al.trainable);
    CHECK(pc.non_trainable == al.non_trainable);
    REQUIRE(pc.layers.size() == al.layers.size());
    for (std::size_t i = 0; i < pc.layers.size(); ++i) {
      CHECK(pc.layers[i].layer == al.layers[i].layer);
      CHECK(pc.layers[i].trainable == al.layers[i].trainable);
    }
  }
}

TEST_CASE("hidden dense widths equal the flatten width") {
  auto s = small_spec(2, 3, {9, 8, 11});
  s.n_fc_layers = 3;
  const auto m = build_model(s, 1);
  const std::size_t D = 3 * (11 / 4) * (8 / 4) * (9 / 4);
  CHECK(s.flatten_width() == D);
  CHECK(m.weights.fc_w[0].shape() == Shape{D, D});
  CHECK(m.weights.fc_w[1].shape() == Shape{D, D});
  CHECK(m.weights.fc_w[2].shape() == Shape{D, 2});
}

TEST_CASE("forward: logits shape and repeatable inference") {
  const auto s = small_spec(2, 3, {8, 8, 8});
  const auto m = build_model(s, 2);
  std::mt19937_64 rng(1);
  const TensorF batch = random_tensor<float>({5, 1, 8, 8, 8}, rng);
  const auto a = forward(s, m.weights, false, batch, Mode::Infer, nullptr);
  const auto b = forward(s, m.weights, false, batch, Mode::Infer, nullptr);
  CHECK(a.logits.shape() == Shape{5, 2});
  CHECK(a.logits == b.logits);
  CHECK(code_of([&] { forward(s, m.weights, false, batch, Mode::Train, nullptr); }) == ErrorCode::InvalidArgument);
  CHECK(code_of([&] { forward(s, m.weights, false, TensorF({1, 1, 8, 8, 7}), Mode::Infer, nullptr); }) ==
        ErrorCode::ShapeMismatch);
}

TEST_CASE("forward follows conv, batchnorm, pool, relu, dense") {
  auto s = small_spec(1, 2, {6, 4, 4});
  s.dropout_rate = 0.0;
  auto w = build_model(s, 3).weights.cast<double>();
  std::mt19937_64 rng(2);
  w.bn_mean[0] = random_tensor({2}, rng);
  w.bn_var[0] = random_tensor({2}, rng, 0.5, 2.0);
  w.bn_gamma[0] = random_tensor({2}, rng);
  w.conv_b[0] = random_tensor({2}, rng);
  const TensorD x = random_tensor({1, 1, 4, 4, 6}, rng);
  const TensorD conv = testing::conv3d_oracle(x, w.conv_w[0], w.conv_b[0]);
  TensorD bn = conv;
  for (std::size_t i = 0; i < bn.size(); ++i) {
    const std::size_t c = i / 96;
    bn[i] = w.bn_gamma[0][c] * (conv[i] - w.bn_mean[0][c]) / std::sqrt(w.bn_var[0][c] + 1e-3) + w.bn_beta[0][c];
  }
  TensorD h = testing::maxpool_oracle(bn).output;
  for (auto& v : h.data()) v = std::max(v, 0.0);
  const TensorD logits = testing::dense_oracle(h.reshaped({1, h.size()}), w.fc_w[0], w.fc_b[0]);
  const auto c = forward(s, w, false, x, Mode::Infer, nullptr);
  for (std::size_t k = 0; k < 2; ++k) CHECK(c.logits[k] == doctest::Approx(logits[k]).epsilon(1e-12));
}

TEST_CASE("whole-network gradient check for every grid spec") {
  for (const auto& e : experiment_grid()) {
    ModelSpec s = e.spec;
    const std::uint32_t side = s.n_blocks == 5 ? 32 : 16;
    s.input_dims = {side, side, side};
    CAPTURE(e.name);
    CHECK(network_grad_check(s, 11) < 1e-5);
  }
}

TEST_CASE("save, load, save gives identical bytes") {
  testing::TempDir tmp;
  auto m = build_model(small_spec(2, 3, {8, 8, 8}), 9);
  m.train_meta = {{"note", "x"}};
  save_model(m, tmp / "m.voxm");
  const auto back = load_model(tmp / "m.voxm");
  CHECK(back == m);
  save_model(back, tmp / "n.voxm");
  CHECK(read_file_bytes(tmp / "m.voxm") == read_file_bytes(tmp / "n.voxm"));
}

TEST_CASE("tampered or damaged model files are rejected") {
  const auto m = build_model(small_spec(1, 2, {4, 4, 4}), 1);
  const auto bytes = encode_model(m);
  std::uint32_t hlen = 0;
  for (int i = 0; i < 4; ++i) hlen |= std::uint32_t(bytes[8 + std::size_t(i)]) << (8 * i);
  auto header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + hlen);
  header["tensors"][0]["shape"] = {2, 1, 3, 3, 2};
  const std::string h = header.dump();
  std::vector<std::uint8_t> tampered(bytes.begin(), bytes.begin() + 8);
  for (int i = 0; i < 4; ++i) tampered.push_back(std::uint8_t(h.size() >> (8 * i)));
  tampered.insert(tampered.end(), h.begin(), h.end());
  tampered.insert(tampered.end(), bytes.begin() + 12 + hlen, bytes.end());
  CHECK(code_of([&] { decode_model(tampered); }) == ErrorCode::Integrity);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK(code_of([&] { decode_model(bad); }) == ErrorCode::FormatBadMagic);
  auto shortp = bytes;
  shortp.pop_back();
  CHECK(code_of([&] { decode_model(shortp); }) == ErrorCode::FormatTruncated);
  auto longp = bytes;
  longp.push_back(0);
  CHECK(code_of([&] { decode_model(longp); }) == ErrorCode::FormatTrailingBytes);
}

TEST_CASE("spec json round trip and strictness") {
  auto s = small_spec(4, 10, {89, 32, 94});
  s.dropout_placement = DropoutPlacement::AfterEachBlock;
  s.n_fc_layers = 2;
  CHECK(spec_from_json(spec_to_json(s)) == s);
  auto j = spec_to_json(s);
  j["bogus"] = 1;
  CHECK(code_of([&] { spec_from_json(j); }) == ErrorCode::Schema);
}

TEST_CASE("published parameter figures are reported next to computed ones") {
  const auto rows = paper_parameter_counts();
  REQUIRE(rows.size() == 5);
  for (const auto& r : rows) {
    CHECK(r.computed.total() == count_parameters(r.spec).total());
    MESSAGE(r.name << ": computed " << r.computed.total() << ", published " << r.published);
  }
  const std::string text = parameter_report_text(experiment_grid(), rows);
  CHECK(text.find("6,402") != std::string::npos);
  CHECK(text.find("44,722") != std::string::npos);
}

}
