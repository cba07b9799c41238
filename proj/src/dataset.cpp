#include "voxlrp/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>
#include <set>

#include <nlohmann/json.hpp>

#include "voxlrp/error.hpp"

namespace voxlrp {

using nlohmann::json;

std::string to_string(Diagnosis d) {
  switch (d) {
    case Diagnosis::NC: return "NC";
    case Diagnosis::MCI: return "MCI";
    case Diagnosis::AD: return "AD";
  }
  return "NC";
}

Diagnosis parse_diagnosis(const std::string& s) {
  if (s == "NC" || s == "CN") return Diagnosis::NC;
  if (s == "MCI") return Diagnosis::MCI;
  if (s == "AD") return Diagnosis::AD;
  fail(ErrorCode::Schema, "unknown diagnostic label '" + s + "'");
}

std::filesystem::path DatasetManifest::mask_file(const std::string& name) const {
  const auto it = masks.find(name);
  if (it == masks.end()) fail(ErrorCode::NotFound, "manifest has no mask named '" + name + "'");
  return root / it->second;
}

BinaryMask DatasetManifest::load_mask(const std::string& name) const {
  BinaryMask m = read_mask(mask_file(name));
  require(m.dims() == dims, ErrorCode::DimMismatch, "mask '" + name + "' dims differ from manifest");
  return m;
}

Volume3D DatasetManifest::load_volume(const SubjectRecord& s) const {
  Volume3D v = read_volume(volume_file(s));
  require(v.dims() == dims, ErrorCode::DimMismatch, "volume of " + s.id + " dims differ from manifest");
  return v;
}

std::optional<std::size_t> DatasetManifest::find(const std::string& id) const {
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    if (subjects[i].id == id) return i;
  }
  return std::nullopt;
}

const SubjectRecord& DatasetManifest::subject(const std::string& id) const {
  const auto i = find(id);
  if (!i) fail(ErrorCode::NotFound, "unknown subject '" + id + "'");
  return subjects[*i];
}

namespace {

template <typename T>
T field(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) fail(ErrorCode::Schema, where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    fail(ErrorCode::Schema, where + ": field '" + key + "' has the wrong type");
  }
}

Dims parse_dims(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 3) fail(ErrorCode::Schema, where + ": dims must be [nx, ny, nz]");
  Dims d;
  try {
    d = {j[0].get<std::uint32_t>(), j[1].get<std::uint32_t>(), j[2].get<std::uint32_t>()};
  } catch (const json::exception&) {
    fail(ErrorCode::Schema, where + ": dims must be non-negative integers");
  }
  if (d.nx == 0 || d.ny == 0 || d.nz == 0) fail(ErrorCode::Schema, where + ": dims must be positive");
  return d;
}

}  // namespace

DatasetManifest load_manifest(const std::filesystem::path& path) {
  json doc;
  try {
    doc = json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    fail(ErrorCode::Schema, "manifest " + path.string() + ": " + e.what());
  }
  const std::string where = "manifest " + path.string();
  if (!doc.is_object()) fail(ErrorCode::Schema, where + ": top level must be an object");
  for (const auto& [key, _] : doc.items()) {
    static const std::set<std::string> known{"dims", "subjects", "masks", "provenance"};
    if (!known.count(key)) fail(ErrorCode::Schema, where + ": unknown key '" + key + "'");
  }

  DatasetManifest m;
  m.root = path.parent_path();
  if (!doc.contains("dims")) fail(ErrorCode::Schema, where + ": missing 'dims'");
  m.dims = parse_dims(doc["dims"], where);
  if (!doc.contains("subjects") || !doc["subjects"].is_array()) {
    fail(ErrorCode::Schema, where + ": 'subjects' must be an array");
  }

  std::set<std::string> ids;
  for (const auto& js : doc["subjects"]) {
    if (!js.is_object()) fail(ErrorCode::Schema, where + ": subject entries must be objects");
    SubjectRecord s;
    s.id = field<std::string>(js, "id", where);
    const std::string sw = where + " subject " + s.id;
    s.label = parse_diagnosis(field<std::string>(js, "label", sw));
    s.age = field<double>(js, "age", sw);
    const auto g = field<std::string>(js, "gender", sw);
    if (g != "M" && g != "F") fail(ErrorCode::Schema, sw + ": gender must be M or F");
    s.gender = g == "F" ? Gender::F : Gender::M;
    s.tiv = field<double>(js, "tiv", sw);
    s.field_strength = field<double>(js, "field_strength", sw);
    if (js.contains("mmse") && !js["mmse"].is_null()) s.mmse = field<int>(js, "mmse", sw);
    s.volume_path = field<std::string>(js, "volume", sw);
    if (s.id.empty()) fail(ErrorCode::Schema, where + ": empty subject id");
    if (!(s.age > 0)) fail(ErrorCode::Schema, sw + ": age must be positive");
    if (!(s.field_strength > 0)) fail(ErrorCode::Schema, sw + ": field_strength must be positive");
    if (!ids.insert(s.id).second) fail(ErrorCode::DuplicateId, where + ": duplicate subject id '" + s.id + "'");
    m.subjects.push_back(std::move(s));
  }

  if (doc.contains("masks")) {
    if (!doc["masks"].is_object()) fail(ErrorCode::Schema, where + ": 'masks' must be an object");
    for (const auto& [name, p] : doc["masks"].items()) {
      if (!p.is_string()) fail(ErrorCode::Schema, where + ": mask paths must be strings");
      m.masks[name] = p.get<std::string>();
    }
  }
  if (doc.contains("provenance")) m.provenance_json = doc["provenance"].dump();

  for (const auto& s : m.subjects) {
    const auto file = m.volume_file(s);
    if (!std::filesystem::exists(file)) fail(ErrorCode::NotFound, "volume not found: " + file.string());
    const Dims d = read_volume_dims(file);
    if (!(d == m.dims)) {
      fail(ErrorCode::DimMismatch, "volume of " + s.id + " is " + to_string(d) + ", manifest dims are " +
                                       to_string(m.dims));
    }
  }
  for (const auto& [name, rel] : m.masks) {
    const auto file = m.root / rel;
    if (!std::filesystem::exists(file)) fail(ErrorCode::NotFound, "mask not found: " + file.string());
    const Dims d = read_volume_dims(file);
    if (!(d == m.dims)) fail(ErrorCode::DimMismatch, "mask '" + name + "' is " + to_string(d));
  }
  return m;
}

std::string manifest_to_json(const DatasetManifest& m) {
  json doc;
  doc["dims"] = {m.dims.nx, m.dims.ny, m.dims.nz};
  json subjects = json::array();
  for (const auto& s : m.subjects) {
    json js{{"id", s.id},
            {"label", to_string(s.label)},
            {"age", s.age},
            {"gender", s.gender == Gender::F ? "F" : "M"},
            {"tiv", s.tiv},
            {"field_strength", s.field_strength},
            {"volume", s.volume_path}};
    if (s.mmse) js["mmse"] = *s.mmse;
    subjects.push_back(std::move(js));
  }
  doc["subjects"] = std::move(subjects);
  doc["masks"] = m.masks;
  doc["provenance"] = json::parse(m.provenance_json);
  return doc.dump(2) + "\n";
}

void save_manifest(const DatasetManifest& m) {
  write_text_file(m.root / "manifest.json", manifest_to_json(m));
}

// --- synthetic cohort -------------------------------------------------------

LesionSpec default_lesion(const Dims& d) {
  LesionSpec l;
  l.center = {0.35 * d.nx, 0.5 * d.ny, 0.45 * d.nz};
  l.radius = std::min({d.nx, d.ny, d.nz}) / 8.0;
  return l;
}

Volume3D make_template(const Dims& d) {
  Volume3D t(d);
  const double cx = (d.nx - 1) / 2.0, cy = (d.ny - 1) / 2.0, cz = (d.nz - 1) / 2.0;
  const double ax = 0.45 * d.nx, ay = 0.45 * d.ny, az = 0.45 * d.nz;
  float peak = 0.0f;
  for (std::uint32_t z = 0; z < d.nz; ++z) {
    for (std::uint32_t y = 0; y < d.ny; ++y) {
      for (std::uint32_t x = 0; x < d.nx; ++x) {
        const double u = (x - cx) / ax, v = (y - cy) / ay, w = (z - cz) / az;
        const double r2 = u * u + v * v + w * w;
        if (r2 >= 1.0) continue;
        // Soft falloff towards the boundary with a gentle gyral texture.
        const double texture = 0.08 * std::cos(2.5 * u) * std::cos(3.0 * v) * std::cos(2.0 * w);
        const double value = (0.65 + 0.35 * (1.0 - r2)) * (1.0 - std::pow(r2, 6.0)) + texture;
        t.at(x, y, z) = static_cast<float>(std::max(0.0, value));
        peak = std::max(peak, t.at(x, y, z));
      }
    }
  }
  for (float& v : t.values()) v /= peak;
  return t;
}

BinaryMask make_lesion_mask(const Dims& d, const LesionSpec& l) {
  for (int a = 0; a < 3; ++a) {
    const double n = d.extent(a);
    if (!(l.radius > 0) || l.center[a] - l.radius <= 0.0 || l.center[a] + l.radius >= n - 1.0) {
      fail(ErrorCode::InvalidArgument, "lesion region must lie strictly inside the volume");
    }
  }
  BinaryMask m(d);
  for (std::uint32_t z = 0; z < d.nz; ++z) {
    for (std::uint32_t y = 0; y < d.ny; ++y) {
      for (std::uint32_t x = 0; x < d.nx; ++x) {
        const double dx = x - l.center[0], dy = y - l.center[1], dz = z - l.center[2];
        if (dx * dx + dy * dy + dz * dz <= l.radius * l.radius) {
          m.set(x + std::size_t{d.nx} * (y + std::size_t{d.ny} * z), true);
        }
      }
    }
  }
  return m;
}

double covariate_effect(const CovariateSpec& spec, const SubjectCovariates& cov, double template_value,
                        std::uint32_t x, std::uint32_t nx) {
  const double spatial = template_value * (0.5 + static_cast<double>(x) / nx);
  return spatial * (spec.age_effect * (cov.age - 70.0) +
                    spec.gender_effect * (cov.gender == Gender::F ? 1.0 : 0.0) +
                    spec.tiv_effect * (cov.tiv - 1500.0) + spec.field_effect * (cov.field_strength - 1.5));
}

Volume3D synthesize_subject_mean(const Volume3D& tmpl, const BinaryMask& lesion, double multiplier,
                                 const SubjectCovariates& cov, const CovariateSpec& spec) {
  require(tmpl.dims() == lesion.dims(), ErrorCode::DimMismatch, "template and lesion dims differ");
  const Dims& d = tmpl.dims();
  Volume3D v(d);
  for (std::uint32_t z = 0; z < d.nz; ++z) {
    for (std::uint32_t y = 0; y < d.ny; ++y) {
      for (std::uint32_t x = 0; x < d.nx; ++x) {
        const std::size_t i = tmpl.index(x, y, z);
        const double t = tmpl[i];
        const double anatomy = lesion[i] ? t * multiplier : t;
        v[i] = static_cast<float>(anatomy + covariate_effect(spec, cov, t, x, d.nx));
      }
    }
  }
  return v;
}

SyntheticCohort build_synthetic_cohort(const CohortSpec& spec, std::vector<Volume3D>* volumes) {
  if (spec.n_subjects < 4) fail(ErrorCode::InvalidArgument, "synthetic cohort needs at least 4 subjects");
  if (spec.dims.nx < 8 || spec.dims.ny < 8 || spec.dims.nz < 8) {
    fail(ErrorCode::InvalidArgument, "synthetic cohort dims must be at least 8 per axis");
  }
  const auto& lesion = spec.lesion;
  if (!(lesion.severity_min < lesion.severity_max)) {
    fail(ErrorCode::InvalidArgument, "lesion severity range is empty");
  }

  SyntheticCohort cohort;
  cohort.tmpl = make_template(spec.dims);
  cohort.lesion_mask = make_lesion_mask(spec.dims, lesion);
  auto& m = cohort.manifest;
  m.dims = spec.dims;
  m.masks["hippocampus"] = "masks/hippocampus.voxw";

  const auto& cs = spec.covariates;
  const float sigma = static_cast<float>(cs.noise_sigma);  // template peak is 1
  json severity = json::object();
  if (volumes) volumes->clear();

  for (std::size_t i = 0; i < spec.n_subjects; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                      static_cast<std::uint32_t>(i)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    const double mult = lesion.severity_min + (lesion.severity_max - lesion.severity_min) * unit(rng);
    SubjectCovariates cov;
    cov.age = std::round(cs.age_min + (cs.age_max - cs.age_min) * unit(rng));
    cov.gender = unit(rng) < cs.female_fraction ? Gender::F : Gender::M;
    cov.tiv = std::round(cs.tiv_min + (cs.tiv_max - cs.tiv_min) * unit(rng));
    cov.field_strength = unit(rng) < cs.high_field_fraction ? 3.0 : 1.5;

    Volume3D v = synthesize_subject_mean(cohort.tmpl, cohort.lesion_mask, mult, cov, cs);
    if (sigma > 0.0f) {
      std::normal_distribution<float> noise(0.0f, sigma);
      for (float& x : v.values()) x += noise(rng);
    }

    char id[32];
    std::snprintf(id, sizeof id, "sub-%03zu", i);
    SubjectRecord r;
    r.id = id;
    r.label = mult < lesion.ad_threshold ? Diagnosis::AD : Diagnosis::NC;
    r.age = cov.age;
    r.gender = cov.gender;
    r.tiv = cov.tiv;
    r.field_strength = cov.field_strength;
    r.mmse = static_cast<int>(std::clamp(std::lround(30.0 - 14.0 * (1.0 - mult)), 0L, 30L));
    r.volume_path = std::string("volumes/") + id + ".voxw";
    m.subjects.push_back(r);
    cohort.multipliers.push_back(mult);
    severity[r.id] = mult;
    if (volumes) volumes->push_back(std::move(v));
  }

  json prov{{"description",
             "synthetic cohort: smooth template + seeded Gaussian noise; lesion multiplier m ~ U[min,max] "
             "inside the 'hippocampus' mask; label AD iff m < ad_threshold; covariate effects are "
             "coefficient * T(p) * (0.5 + x/nx) per unit offset from age 70, gender M, TIV 1500, 1.5 T"},
            {"seed", spec.seed},
            {"generator", "voxlrp.synthetic.v1"},
            {"lesion",
             {{"center", lesion.center},
              {"radius", lesion.radius},
              {"severity_min", lesion.severity_min},
              {"severity_max", lesion.severity_max},
              {"ad_threshold", lesion.ad_threshold}}},
            {"covariates",
             {{"age_effect", cs.age_effect},
              {"gender_effect", cs.gender_effect},
              {"tiv_effect", cs.tiv_effect},
              {"field_effect", cs.field_effect},
              {"noise_sigma", cs.noise_sigma}}},
            {"severity", severity}};
  m.provenance_json = prov.dump();
  return cohort;
}

DatasetManifest generate_synthetic_cohort(const CohortSpec& spec, const std::filesystem::path& out_dir) {
  std::vector<Volume3D> volumes;
  SyntheticCohort cohort = build_synthetic_cohort(spec, &volumes);
  cohort.manifest.root = out_dir;
  for (std::size_t i = 0; i < volumes.size(); ++i) {
    write_volume(volumes[i], out_dir / cohort.manifest.subjects[i].volume_path);
  }
  write_mask(cohort.lesion_mask, out_dir / cohort.manifest.masks.at("hippocampus"));
  write_volume(cohort.tmpl, out_dir / "reference" / "template.voxw");
  save_manifest(cohort.manifest);
  return cohort.manifest;
}

double region_intensity_sum(const Volume3D& v, const BinaryMask& region) {
  require(v.dims() == region.dims(), ErrorCode::DimMismatch, "region dims differ from volume");
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (region[i]) s += v[i];
  }
  return s;
}

}  // namespace voxlrp
