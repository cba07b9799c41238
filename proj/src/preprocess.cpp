#include "voxlrp/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include "voxlrp/error.hpp"

namespace voxlrp {

using nlohmann::json;

namespace {

constexpr double kMaxCondition = 1e12;
constexpr std::size_t P = kDesignColumns;

}  // namespace

std::array<double, kDesignColumns> design_row(const SubjectRecord& s) {
  return {1.0, s.age, s.gender == Gender::F ? 1.0 : 0.0, s.tiv, s.field_strength};
}

ResidualModel fit_residual_model(std::span<const SubjectRecord> subjects, std::span<const Volume3D> volumes) {
  require(subjects.size() == volumes.size(), ErrorCode::InvalidArgument,
          "fit_residual_model: subjects and volumes differ in length");
  std::vector<std::size_t> controls;
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    if (subjects[i].label == Diagnosis::NC) controls.push_back(i);
  }
  if (controls.size() <= P) {
    fail(ErrorCode::Precondition, "fit_residual_model: need at least " + std::to_string(P + 1) +
                                      " NC subjects, got " + std::to_string(controls.size()));
  }
  const Dims dims = volumes[controls.front()].dims();
  for (std::size_t i : controls) {
    require(volumes[i].dims() == dims, ErrorCode::DimMismatch, "fit_residual_model: volume dims differ");
  }

  const Eigen::Index n = static_cast<Eigen::Index>(controls.size());
  Eigen::MatrixXd X(n, static_cast<Eigen::Index>(P));
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto row = design_row(subjects[controls[static_cast<std::size_t>(r)]]);
    for (std::size_t k = 0; k < P; ++k) X(r, static_cast<Eigen::Index>(k)) = row[k];
  }

  // Equilibrate columns so the condition estimate reflects collinearity, not units.
  Eigen::VectorXd scale = X.colwise().norm().transpose();
  for (Eigen::Index k = 0; k < scale.size(); ++k) {
    if (scale(k) == 0.0) scale(k) = 1.0;
  }
  const Eigen::MatrixXd Xs = X * scale.cwiseInverse().asDiagonal();
  const Eigen::MatrixXd gram = Xs.transpose() * Xs;

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi / lo > kMaxCondition) {
    const Eigen::VectorXd null_dir = eig.eigenvectors().col(0);
    std::ostringstream cols;
    bool first = true;
    for (std::size_t k = 0; k < P; ++k) {
      if (std::abs(null_dir(static_cast<Eigen::Index>(k))) > 0.1) {
        cols << (first ? "" : ", ") << kDesignColumnNames[k];
        first = false;
      }
    }
    fail(ErrorCode::RankDeficient, "fit_residual_model: design matrix is rank deficient; collinear columns: " +
                                       cols.str());
  }
  const Eigen::LLT<Eigen::MatrixXd> llt(gram);

  const std::size_t nvox = dims.voxel_count();
  ResidualModel model;
  model.dims = dims;
  model.betas.assign(P * nvox, 0.0);
  for (std::size_t i : controls) model.fit_population.push_back(subjects[i].id);

  // rhs[k][j] = sum_i Xs(i,k) * target_i(j); solved voxel by voxel against the shared factor.
  std::vector<double> rhs(P * nvox);
  auto solve_into = [&](auto target_of) {
    std::fill(rhs.begin(), rhs.end(), 0.0);
    for (Eigen::Index r = 0; r < n; ++r) {
      for (std::size_t k = 0; k < P; ++k) {
        const double xk = Xs(r, static_cast<Eigen::Index>(k));
        double* out = rhs.data() + k * nvox;
        for (std::size_t j = 0; j < nvox; ++j) out[j] += xk * target_of(static_cast<std::size_t>(r), j);
      }
    }
    Eigen::Matrix<double, static_cast<int>(P), 1> b;
    for (std::size_t j = 0; j < nvox; ++j) {
      for (std::size_t k = 0; k < P; ++k) b(static_cast<Eigen::Index>(k)) = rhs[k * nvox + j];
      const Eigen::VectorXd sol = llt.solve(b);
      for (std::size_t k = 0; k < P; ++k) {
        model.betas[k * nvox + j] += sol(static_cast<Eigen::Index>(k)) / scale(static_cast<Eigen::Index>(k));
      }
    }
  };

  solve_into([&](std::size_t r, std::size_t j) -> double { return volumes[controls[r]][j]; });
  // One refinement pass on the residuals tightens the normal-equation solution.
  solve_into([&](std::size_t r, std::size_t j) -> double {
    const auto& xr = X.row(static_cast<Eigen::Index>(r));
    double pred = 0.0;
    for (std::size_t k = 0; k < P; ++k) pred += xr(static_cast<Eigen::Index>(k)) * model.betas[k * nvox + j];
    return volumes[controls[r]][j] - pred;
  });
  return model;
}

ResidualModel fit_residual_model(const DatasetManifest& manifest, std::span<const std::size_t> subset) {
  std::vector<SubjectRecord> subjects;
  std::vector<Volume3D> volumes;
  for (std::size_t i : subset) {
    const auto& s = manifest.subjects.at(i);
    if (s.label != Diagnosis::NC) continue;
    subjects.push_back(s);
    volumes.push_back(manifest.load_volume(s));
  }
  return fit_residual_model(subjects, volumes);
}

Volume3D predict(const ResidualModel& model, const SubjectRecord& subject) {
  const auto x = design_row(subject);
  const std::size_t nvox = model.voxel_count();
  Volume3D out(model.dims);
  for (std::size_t j = 0; j < nvox; ++j) {
    double p = 0.0;
    for (std::size_t k = 0; k < P; ++k) p += model.betas[k * nvox + j] * x[k];
    out[j] = static_cast<float>(p);
  }
  return out;
}

Volume3D residualize(const ResidualModel& model, const SubjectRecord& subject, const Volume3D& v) {
  require(v.dims() == model.dims, ErrorCode::DimMismatch,
          "residualize: volume dims " + to_string(v.dims()) + " differ from model dims " + to_string(model.dims));
  const auto x = design_row(subject);
  const std::size_t nvox = model.voxel_count();
  Volume3D out(model.dims);
  for (std::size_t j = 0; j < nvox; ++j) {
    double p = 0.0;
    for (std::size_t k = 0; k < P; ++k) p += model.betas[k * nvox + j] * x[k];
    out[j] = static_cast<float>(static_cast<double>(v[j]) - p);
  }
  return out;
}

void save_residual_model(const ResidualModel& model, const std::filesystem::path& path) {
  const Dims d = model.dims;
  Volume3D planes(Dims{d.nx, d.ny, static_cast<std::uint32_t>(d.nz * P)});
  for (std::size_t i = 0; i < model.betas.size(); ++i) planes[i] = static_cast<float>(model.betas[i]);
  write_volume(planes, path);
  json side{{"dims", {d.nx, d.ny, d.nz}},
            {"columns", kDesignColumnNames},
            {"gender_coding", "M=0,F=1"},
            {"layout", "coefficient k stored in z-planes [k*nz, (k+1)*nz)"},
            {"fit_population", model.fit_population}};
  write_text_file(path.string() + ".json", side.dump(2) + "\n");
}

ResidualModel load_residual_model(const std::filesystem::path& path) {
  const Volume3D planes = read_volume(path);
  json side;
  try {
    side = json::parse(read_text_file(path.string() + ".json"));
  } catch (const json::parse_error& e) {
    fail(ErrorCode::Schema, "residual model sidecar: " + std::string(e.what()));
  }
  ResidualModel m;
  try {
    m.dims = {side.at("dims")[0].get<std::uint32_t>(), side.at("dims")[1].get<std::uint32_t>(),
              side.at("dims")[2].get<std::uint32_t>()};
    m.fit_population = side.at("fit_population").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    fail(ErrorCode::Schema, "residual model sidecar: " + std::string(e.what()));
  }
  const Dims expect{m.dims.nx, m.dims.ny, static_cast<std::uint32_t>(m.dims.nz * P)};
  require(planes.dims() == expect, ErrorCode::Integrity, "residual model planes do not match sidecar dims");
  m.betas.assign(planes.values().begin(), planes.values().end());
  return m;
}

// --- folds ------------------------------------------------------------------

std::vector<std::string> FoldSplit::fold_members(std::size_t fold) const {
  std::vector<std::string> out;
  for (const auto& [id, f] : assignments) {
    if (f == fold) out.push_back(id);
  }
  return out;
}

FoldSplit stratified_kfold(const DatasetManifest& manifest, std::size_t k, std::uint64_t seed) {
  require(k >= 2, ErrorCode::InvalidArgument, "stratified_kfold: k must be at least 2");
  std::array<std::vector<std::size_t>, 2> classes;
  for (std::size_t i = 0; i < manifest.subjects.size(); ++i) {
    classes[binary_label(manifest.subjects[i].label)].push_back(i);
  }
  for (std::size_t c = 0; c < 2; ++c) {
    if (classes[c].size() < k) {
      fail(ErrorCode::Precondition, "stratified_kfold: class " + std::string(c == 0 ? "NC" : "MCI/AD") +
                                        " has " + std::to_string(classes[c].size()) + " members, fewer than k=" +
                                        std::to_string(k));
    }
  }
  FoldSplit split;
  split.fold_count = k;
  split.seed = seed;
  std::mt19937_64 rng(seed);
  std::size_t offset = 0;
  for (auto& members : classes) {
    std::shuffle(members.begin(), members.end(), rng);
    for (std::size_t r = 0; r < members.size(); ++r) {
      split.assignments[manifest.subjects[members[r]].id] = (offset + r) % k;
    }
    offset += members.size();
  }
  return split;
}

void save_fold_split(const FoldSplit& split, const std::filesystem::path& path) {
  json doc{{"fold_count", split.fold_count}, {"seed", split.seed}, {"assignments", split.assignments}};
  write_text_file(path, doc.dump(2) + "\n");
}

FoldSplit load_fold_split(const std::filesystem::path& path) {
  FoldSplit split;
  try {
    const json doc = json::parse(read_text_file(path));
    split.fold_count = doc.at("fold_count").get<std::size_t>();
    split.seed = doc.at("seed").get<std::uint64_t>();
    split.assignments = doc.at("assignments").get<std::map<std::string, std::size_t>>();
  } catch (const json::exception& e) {
    fail(ErrorCode::Schema, "fold split " + path.string() + ": " + e.what());
  }
  for (const auto& [id, f] : split.assignments) {
    if (f >= split.fold_count) fail(ErrorCode::Schema, "fold split: fold index out of range for " + id);
  }
  return split;
}

// --- augmentation -----------------------------------------------------------

AugmentationLevel::AugmentationLevel(int lvl) : level(lvl) {
  if (lvl < 1 || lvl > 7) fail(ErrorCode::InvalidArgument, "augmentation level must be in 1..7");
}

std::vector<Shift> AugmentationLevel::shift_list() const {
  static constexpr std::array<Shift, 7> kCanonical = {
      Shift{0, 0, 0},  Shift{-2, 0, 0}, Shift{+2, 0, 0}, Shift{0, -2, 0},
      Shift{0, +2, 0}, Shift{0, 0, -2}, Shift{0, 0, +2}};
  return {kCanonical.begin(), kCanonical.begin() + level};
}

std::vector<AugmentedSample> make_augmented_training_set(std::span<const std::size_t> subjects,
                                                          std::span<const int> labels,
                                                          AugmentationLevel level) {
  require(subjects.size() == labels.size(), ErrorCode::InvalidArgument,
          "make_augmented_training_set: subjects and labels differ in length");
  const auto shifts = level.shift_list();
  std::vector<AugmentedSample> out;
  out.reserve(subjects.size() * shifts.size());
  for (const Shift& s : shifts) {
    for (std::size_t i = 0; i < subjects.size(); ++i) out.push_back({subjects[i], s, labels[i]});
  }
  return out;
}

}  // namespace voxlrp
