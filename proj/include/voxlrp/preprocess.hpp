#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "voxlrp/dataset.hpp"
#include "voxlrp/volume.hpp"

namespace voxlrp {

// --- covariate residualization ----------------------------------------------

inline constexpr std::size_t kDesignColumns = 5;
inline constexpr std::array<const char*, kDesignColumns> kDesignColumnNames = {
    "intercept", "age", "gender", "tiv", "field_strength"};

/// Design row (1, age, gender with M=0 F=1, TIV, field strength).
std::array<double, kDesignColumns> design_row(const SubjectRecord& s);

/// Per-voxel OLS coefficients, coefficient-major: betas[k * n_voxels + j].
struct ResidualModel {
  Dims dims;
  std::vector<double> betas;
  std::vector<std::string> fit_population;

  std::size_t voxel_count() const { return dims.voxel_count(); }
  double beta(std::size_t k, std::size_t voxel) const { return betas[k * voxel_count() + voxel]; }
};

/// Fits on the NC-labelled subjects only; `volumes[i]` belongs to `subjects[i]`.
ResidualModel fit_residual_model(std::span<const SubjectRecord> subjects, std::span<const Volume3D> volumes);
/// Loads each volume on demand through the manifest.
ResidualModel fit_residual_model(const DatasetManifest& manifest, std::span<const std::size_t> subset);

Volume3D predict(const ResidualModel& model, const SubjectRecord& subject);
Volume3D residualize(const ResidualModel& model, const SubjectRecord& subject, const Volume3D& v);

/// Stored as a VOXW volume of dims (nx, ny, 5*nz): coefficient k occupies the
/// z-planes [k*nz, (k+1)*nz). Coefficients are narrowed to f32 on disk. A JSON
/// sidecar (`<path>.json`) keeps dims, column names and the fit population.
void save_residual_model(const ResidualModel& model, const std::filesystem::path& path);
ResidualModel load_residual_model(const std::filesystem::path& path);

// --- cross-validation split -------------------------------------------------

struct FoldSplit {
  std::size_t fold_count = 10;
  std::uint64_t seed = 1;
  std::map<std::string, std::size_t> assignments;

  std::vector<std::string> fold_members(std::size_t fold) const;
};

/// Stratified on the binary label (NC vs MCI/AD), deterministic per seed.
FoldSplit stratified_kfold(const DatasetManifest& manifest, std::size_t k, std::uint64_t seed);
void save_fold_split(const FoldSplit& split, const std::filesystem::path& path);
FoldSplit load_fold_split(const std::filesystem::path& path);

// --- augmentation -----------------------------------------------------------

struct Shift {
  int dx = 0, dy = 0, dz = 0;
  bool operator==(const Shift&) const = default;
};

/// Level k in 1..7 yields k copies: the original plus the first k-1 entries of
/// (-2,0,0), (+2,0,0), (0,-2,0), (0,+2,0), (0,0,-2), (0,0,+2).
struct AugmentationLevel {
  int level = 1;
  explicit AugmentationLevel(int level);
  std::vector<Shift> shift_list() const;  // first entry is the identity
};

struct AugmentedSample {
  std::size_t subject = 0;  // index into the caller's subject list
  Shift shift;
  int label = 0;
};

std::vector<AugmentedSample> make_augmented_training_set(std::span<const std::size_t> subjects,
                                                          std::span<const int> labels,
                                                          AugmentationLevel level);

}  // namespace voxlrp
