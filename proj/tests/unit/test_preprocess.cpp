#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "support.hpp"
#include "voxlrp/error.hpp"
#include "voxlrp/preprocess.hpp"

using namespace voxlrp;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::Undefined;
}

SubjectRecord subject(std::string id, Diagnosis label, double age, Gender g, double tiv, double fs) {
  SubjectRecord s;
  s.id = std::move(id);
  s.label = label;
  s.age = age;
  s.gender = g;
  s.tiv = tiv;
  s.field_strength = fs;
  return s;
}

// Integer covariates and integer per-voxel coefficients: every voxel value is
// exactly representable, so OLS must recover the coefficients exactly.
struct LinearCohort {
  Dims dims{3, 2, 2};
  std::vector<SubjectRecord> subjects;
  std::vector<Volume3D> volumes;
  std::vector<std::array<double, 5>> betas;  // per voxel
};

LinearCohort linear_cohort(std::size_t n, std::uint64_t seed, double noise = 0.0) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> age(55, 90), tiv(1300, 1700), coin(0, 1), beta(-3, 3);
  std::normal_distribution<double> eps(0.0, noise > 0 ? noise : 1.0);
  LinearCohort c;
  c.betas.resize(c.dims.voxel_count());
  for (auto& b : c.betas)
    for (auto& x : b) x = beta(rng);
  for (std::size_t i = 0; i < n; ++i) {
    auto s = subject("s" + std::to_string(i), i % 3 == 2 ? Diagnosis::AD : Diagnosis::NC, age(rng),
                     coin(rng) ? Gender::F : Gender::M, tiv(rng), coin(rng) ? 3.0 : 1.5);
    const auto x = design_row(s);
    Volume3D v(c.dims);
    for (std::size_t j = 0; j < v.size(); ++j) {
      double y = 0;
      for (std::size_t k = 0; k < 5; ++k) y += c.betas[j][k] * x[k];
      v[j] = static_cast<float>(noise > 0 ? y + eps(rng) : y);
    }
    c.subjects.push_back(s);
    c.volumes.push_back(std::move(v));
  }
  return c;
}

DatasetManifest manifest_with(std::size_t ad, std::size_t nc) {
  DatasetManifest m;
  m.dims = {4, 4, 4};
  for (std::size_t i = 0; i < ad + nc; ++i) {
    char id[16];
    std::snprintf(id, sizeof id, "s%02zu", i);
    m.subjects.push_back(subject(id, i < ad ? Diagnosis::AD : Diagnosis::NC, 70, Gender::M, 1500, 1.5));
  }
  return m;
}

}  // namespace

TEST_SUITE("preprocess") {

TEST_CASE("design row codes gender M=0 F=1") {
  const auto m = design_row(subject("a", Diagnosis::NC, 71, Gender::M, 1400, 3.0));
  const auto f = design_row(subject("b", Diagnosis::NC, 71, Gender::F, 1400, 3.0));
  CHECK(m == std::array<double, 5>{1, 71, 0, 1400, 3.0});
  CHECK(f[2] == 1.0);
}

TEST_CASE("v = 3 + 2 age recovers beta0 = 3, beta1 = 2, others 0") {
  std::vector<SubjectRecord> subs;
  std::vector<Volume3D> vols;
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> age(60, 85), tiv(1300, 1700), coin(0, 1);
  for (int i = 0; i < 12; ++i) {
    auto s = subject("c" + std::to_string(i), Diagnosis::NC, age(rng), coin(rng) ? Gender::F : Gender::M, tiv(rng),
                     coin(rng) ? 3.0 : 1.5);
    vols.emplace_back(Dims{2, 2, 2}, float(3 + 2 * s.age));
    subs.push_back(s);
  }
  const auto m = fit_residual_model(subs, vols);
  for (std::size_t j = 0; j < 8; ++j) {
    CHECK(std::abs(m.beta(0, j) - 3.0) < 1e-9);
    CHECK(std::abs(m.beta(1, j) - 2.0) < 1e-9);
    for (std::size_t k = 2; k < 5; ++k) CHECK(std::abs(m.beta(k, j)) < 1e-9);
  }
  CHECK(m.fit_population.size() == 12);
}

TEST_CASE("constant controls give the intercept and zero slopes") {
  const auto c = linear_cohort(15, 2);
  std::vector<Volume3D> vols(c.volumes.size(), Volume3D(c.dims, 4.25f));
  const auto m = fit_residual_model(c.subjects, vols);
  for (std::size_t j = 0; j < c.dims.voxel_count(); ++j) {
    CHECK(std::abs(m.beta(0, j) - 4.25) < 1e-9);
    for (std::size_t k = 1; k < 5; ++k) CHECK(std::abs(m.beta(k, j)) < 1e-9);
  }
}

TEST_CASE("exact-linear controls: coefficients recovered and residuals vanish") {
  const auto c = linear_cohort(30, 3);
  const auto m = fit_residual_model(c.subjects, c.volumes);
  for (std::size_t j = 0; j < c.dims.voxel_count(); ++j)
    for (std::size_t k = 0; k < 5; ++k) CHECK(std::abs(m.beta(k, j) - c.betas[j][k]) < 1e-9);
  for (std::size_t i = 0; i < c.subjects.size(); ++i) {
    if (c.subjects[i].label != Diagnosis::NC) continue;
    const Volume3D r = residualize(m, c.subjects[i], c.volumes[i]);
    for (float v : r.values()) CHECK(std::abs(v) < 1e-9);
  }
}

TEST_CASE("fit uses the NC subjects only") {
  auto c = linear_cohort(30, 4);
  for (std::size_t i = 0; i < c.subjects.size(); ++i)
    if (c.subjects[i].label != Diagnosis::NC) c.volumes[i] = Volume3D(c.dims, 1e4f);
  const auto m = fit_residual_model(c.subjects, c.volumes);
  for (std::size_t j = 0; j < c.dims.voxel_count(); ++j) CHECK(std::abs(m.beta(1, j) - c.betas[j][1]) < 1e-9);
  for (const auto& id : m.fit_population) CHECK(c.subjects[std::stoul(id.substr(1))].label == Diagnosis::NC);
}

TEST_CASE("patient at prediction minus 5 has residual -5") {
  const auto c = linear_cohort(30, 5);
  const auto m = fit_residual_model(c.subjects, c.volumes);
  const auto p = subject("p", Diagnosis::AD, 77, Gender::F, 1555, 3.0);
  Volume3D v = predict(m, p);
  for (float& x : v.values()) x -= 5.0f;
  const Volume3D r = residualize(m, p, v);
  for (float x : r.values()) CHECK(std::abs(x + 5.0) < 1e-6);
}

TEST_CASE("zero coefficients leave the input unchanged; residualize(predict) is zero") {
  ResidualModel zero{Dims{2, 2, 1}, std::vector<double>(20, 0.0), {}};
  const Volume3D v(Dims{2, 2, 1}, std::vector<float>{1.5f, -2.0f, 0.25f, 7.0f});
  const auto s = subject("a", Diagnosis::MCI, 70, Gender::M, 1500, 1.5);
  CHECK(residualize(zero, s, v) == v);
  const auto c = linear_cohort(25, 6, 0.5);
  const auto m = fit_residual_model(c.subjects, c.volumes);
  for (const auto& sub : c.subjects) {
    const Volume3D p = predict(m, sub);
    const Volume3D r = residualize(m, sub, p);
    for (std::size_t j = 0; j < r.size(); ++j) CHECK(std::abs(r[j]) <= 1e-6 * (1.0 + std::abs(p[j])));
  }
}

TEST_CASE("noisy fit: residuals orthogonal to every design column") {
  const auto c = linear_cohort(40, 7, 0.3);
  const auto m = fit_residual_model(c.subjects, c.volumes);
  for (std::size_t j = 0; j < c.dims.voxel_count(); ++j) {
    for (std::size_t k = 0; k < 5; ++k) {
      double dot = 0, rr = 0, xx = 0;
      for (std::size_t i = 0; i < c.subjects.size(); ++i) {
        if (c.subjects[i].label != Diagnosis::NC) continue;
        const auto x = design_row(c.subjects[i]);
        double r = c.volumes[i][j];
        for (std::size_t q = 0; q < 5; ++q) r -= m.beta(q, j) * x[q];
        dot += r * x[k];
        rr += r * r;
        xx += x[k] * x[k];
      }
      CHECK(std::abs(dot) / std::sqrt(rr * xx) < 1e-6);
    }
  }
}

TEST_CASE("fit preconditions") {
  const auto c = linear_cohort(30, 8);
  std::vector<SubjectRecord> three(c.subjects.begin(), c.subjects.begin() + 4);  // 3 NC + 1 AD
  std::vector<Volume3D> v3(c.volumes.begin(), c.volumes.begin() + 4);
  CHECK(code_of([&] { fit_residual_model(three, v3); }) == ErrorCode::Precondition);
  auto same = c.subjects;
  for (auto& s : same) s.field_strength = 1.5;
  CHECK(code_of([&] { fit_residual_model(same, c.volumes); }) == ErrorCode::RankDeficient);
  auto bad = c.volumes;
  bad[3] = Volume3D(Dims{1, 1, 1});
  CHECK(code_of([&] { fit_residual_model(c.subjects, bad); }) == ErrorCode::DimMismatch);
}

TEST_CASE("residual model save and load") {
  testing::TempDir tmp;
  const auto c = linear_cohort(20, 9, 0.1);
  const auto m = fit_residual_model(c.subjects, c.volumes);
  save_residual_model(m, tmp / "r.voxw");
  const auto back = load_residual_model(tmp / "r.voxw");
  CHECK(back.dims == m.dims);
  CHECK(back.fit_population == m.fit_population);
  REQUIRE(back.betas.size() == 5 * m.voxel_count());
  for (std::size_t i = 0; i < m.betas.size(); ++i) CHECK(back.betas[i] == double(float(m.betas[i])));
  const Volume3D planes = read_volume(tmp / "r.voxw");
  CHECK(planes.dims() == Dims{m.dims.nx, m.dims.ny, 5 * m.dims.nz});
  CHECK(planes[2 * m.voxel_count() + 1] == float(m.beta(2, 1)));
}

TEST_CASE("stratified k-fold: 20 AD + 20 NC over 10 folds") {
  const auto m = manifest_with(20, 20);
  const auto split = stratified_kfold(m, 10, 1);
  for (std::size_t f = 0; f < 10; ++f) {
    std::size_t ad = 0, nc = 0;
    for (const auto& id : split.fold_members(f)) (m.subject(id).label == Diagnosis::AD ? ad : nc)++;
    CHECK(ad == 2);
    CHECK(nc == 2);
  }
}

TEST_CASE("stratified k-fold: 21 AD + 20 NC") {
  const auto m = manifest_with(21, 20);
  const auto split = stratified_kfold(m, 10, 3);
  std::size_t three = 0;
  for (std::size_t f = 0; f < 10; ++f) {
    std::size_t ad = 0, nc = 0;
    for (const auto& id : split.fold_members(f)) (m.subject(id).label == Diagnosis::AD ? ad : nc)++;
    CHECK((ad == 2 || ad == 3));
    three += ad == 3;
    CHECK(nc == 2);
  }
  CHECK(three == 1);
}

TEST_CASE("stratified k-fold: partition, class balance, determinism") {
  for (std::uint64_t seed : {1, 2, 99}) {
    for (auto [ad, nc, k] : {std::array<std::size_t, 3>{37, 53, 10}, {13, 8, 4}, {100, 100, 7}}) {
      const auto m = manifest_with(ad, nc);
      const auto split = stratified_kfold(m, k, seed);
      CHECK(split.assignments == stratified_kfold(m, k, seed).assignments);
      std::set<std::string> seen;
      for (std::size_t f = 0; f < k; ++f) {
        std::size_t a = 0, n = 0;
        for (const auto& id : split.fold_members(f)) {
          CHECK(seen.insert(id).second);
          (m.subject(id).label == Diagnosis::AD ? a : n)++;
        }
        CHECK(std::abs(double(a) - double(ad) / double(k)) <= 1.0);
        CHECK(std::abs(double(n) - double(nc) / double(k)) <= 1.0);
      }
      CHECK(seen.size() == ad + nc);
    }
  }
  const auto m = manifest_with(20, 20);
  CHECK(stratified_kfold(m, 10, 1).assignments != stratified_kfold(m, 10, 2).assignments);
}

TEST_CASE("stratified k-fold: errors and persistence") {
  CHECK(code_of([] { stratified_kfold(manifest_with(3, 20), 10, 1); }) == ErrorCode::Precondition);
  CHECK(code_of([] { stratified_kfold(manifest_with(3, 3), 1, 1); }) == ErrorCode::InvalidArgument);
  testing::TempDir tmp;
  const auto split = stratified_kfold(manifest_with(20, 20), 10, 5);
  save_fold_split(split, tmp / "split.json");
  const auto back = load_fold_split(tmp / "split.json");
  CHECK(back.assignments == split.assignments);
  CHECK(back.seed == 5);
  CHECK(back.fold_count == 10);
}

TEST_CASE("augmentation: levels 1 and 7") {
  const std::vector<std::size_t> subs{0, 1, 2, 3, 4};
  const std::vector<int> labels{0, 1, 1, 0, 1};
  CHECK(make_augmented_training_set(subs, labels, AugmentationLevel(1)).size() == 5);
  const auto seven = make_augmented_training_set(subs, labels, AugmentationLevel(7));
  CHECK(seven.size() == 35);
  for (const auto& s : seven) CHECK(s.label == labels[s.subject]);
  for (std::size_t i = 0; i < subs.size(); ++i) {
    std::set<std::array<int, 3>> shifts;
    for (const auto& s : seven)
      if (s.subject == i) shifts.insert({s.shift.dx, s.shift.dy, s.shift.dz});
    CHECK(shifts.size() == 7);
  }
}

TEST_CASE("augmentation: canonical shift order and bounds") {
  const std::vector<Shift> expected{{0, 0, 0}, {-2, 0, 0}, {2, 0, 0}, {0, -2, 0}, {0, 2, 0}, {0, 0, -2}, {0, 0, 2}};
  for (int k = 1; k <= 7; ++k) {
    const auto list = AugmentationLevel(k).shift_list();
    CHECK(list.size() == std::size_t(k));
    CHECK(std::equal(list.begin(), list.end(), expected.begin()));
  }
  CHECK(code_of([] { AugmentationLevel(0); }) == ErrorCode::InvalidArgument);
  CHECK(code_of([] { AugmentationLevel(8); }) == ErrorCode::InvalidArgument);
}

}
