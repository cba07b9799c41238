#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "voxlrp/volume.hpp"

namespace voxlrp {

enum class Diagnosis { NC, MCI, AD };
enum class Gender { M, F };

std::string to_string(Diagnosis d);
Diagnosis parse_diagnosis(const std::string& s);

/// Binary training label: 0 = NC, 1 = MCI/AD merged.
inline int binary_label(Diagnosis d) { return d == Diagnosis::NC ? 0 : 1; }

struct SubjectRecord {
  std::string id;
  Diagnosis label = Diagnosis::NC;
  double age = 0.0;
  Gender gender = Gender::M;
  double tiv = 0.0;
  double field_strength = 0.0;
  std::optional<int> mmse;
  std::string volume_path;  // relative to the manifest directory
};

/// Manifest JSON schema:
///   {
///     "dims": [nx, ny, nz],
///     "subjects": [{"id", "label": "NC"|"MCI"|"AD", "age", "gender": "M"|"F",
///                   "tiv", "field_strength", "mmse"?, "volume"}],
///     "masks": {"hippocampus": "masks/hippocampus.voxw", ...},
///     "provenance": {"description": "...", "seed"?: int, ...}
///   }
struct DatasetManifest {
  std::filesystem::path root;  // directory containing manifest.json
  Dims dims;
  std::vector<SubjectRecord> subjects;
  std::map<std::string, std::string> masks;
  std::string provenance_json = "{}";  // serialized provenance object

  std::filesystem::path volume_file(const SubjectRecord& s) const { return root / s.volume_path; }
  std::filesystem::path mask_file(const std::string& name) const;
  BinaryMask load_mask(const std::string& name) const;
  Volume3D load_volume(const SubjectRecord& s) const;
  const SubjectRecord& subject(const std::string& id) const;
  std::optional<std::size_t> find(const std::string& id) const;
};

DatasetManifest load_manifest(const std::filesystem::path& path);
/// Writes manifest.json into `manifest.root`.
void save_manifest(const DatasetManifest& manifest);
std::string manifest_to_json(const DatasetManifest& manifest);

// --- synthetic cohort -------------------------------------------------------

struct LesionSpec {
  std::array<double, 3> center{};  // voxel coordinates (x, y, z)
  double radius = 0.0;             // voxels
  double severity_min = 0.3;
  double severity_max = 1.0;
  double ad_threshold = 0.65;      // AD iff multiplier < threshold
};

/// Voxel effects per covariate unit, applied as coefficient * T(p) * (0.5 + x/nx)
/// so the per-voxel slopes vary across space. Reference point: age 70,
/// gender M, TIV 1500, field strength 1.5 T.
struct CovariateSpec {
  double age_min = 60.0, age_max = 90.0;
  double tiv_min = 1300.0, tiv_max = 1700.0;
  double female_fraction = 0.5;
  double high_field_fraction = 0.5;  // 3.0 T vs 1.5 T
  double age_effect = -0.003;        // per year
  double gender_effect = 0.02;       // female
  double tiv_effect = 0.0001;        // per TIV unit
  double field_effect = 0.02;        // per tesla
  double noise_sigma = 0.05;         // fraction of template peak
};

struct CohortSpec {
  std::size_t n_subjects = 200;
  Dims dims{32, 32, 32};
  LesionSpec lesion;
  CovariateSpec covariates;
  std::uint64_t seed = 1;
};

/// Lesion centred at (0.35, 0.5, 0.45) of the extents, radius 1/8 of the smallest extent.
LesionSpec default_lesion(const Dims& dims);

/// Smooth ellipsoidal anatomy with peak intensity 1.
Volume3D make_template(const Dims& dims);
BinaryMask make_lesion_mask(const Dims& dims, const LesionSpec& lesion);

struct SubjectCovariates {
  double age = 70.0;
  Gender gender = Gender::M;
  double tiv = 1500.0;
  double field_strength = 1.5;
};

/// Deterministic part of a subject volume (no noise): T*m inside the lesion,
/// T elsewhere, plus the covariate effects.
Volume3D synthesize_subject_mean(const Volume3D& tmpl, const BinaryMask& lesion, double multiplier,
                                 const SubjectCovariates& cov, const CovariateSpec& spec);

/// Expected voxel intensity given covariates, for the linear covariate part only.
double covariate_effect(const CovariateSpec& spec, const SubjectCovariates& cov, double template_value,
                        std::uint32_t x, std::uint32_t nx);

struct SyntheticSubject {
  SubjectRecord record;
  double multiplier = 1.0;
  Volume3D volume;
};

struct SyntheticCohort {
  DatasetManifest manifest;
  std::vector<double> multipliers;
  Volume3D tmpl;
  BinaryMask lesion_mask;
};

/// Builds the cohort in memory; nothing touches disk.
SyntheticCohort build_synthetic_cohort(const CohortSpec& spec, std::vector<Volume3D>* volumes);

/// Generates the cohort and writes manifest.json, volumes/, masks/ under `out_dir`.
DatasetManifest generate_synthetic_cohort(const CohortSpec& spec, const std::filesystem::path& out_dir);

/// Sum of intensities inside `region` (the hippocampal-volume analog).
double region_intensity_sum(const Volume3D& v, const BinaryMask& region);

}  // namespace voxlrp
