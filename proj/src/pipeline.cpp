#include "voxlrp/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "voxlrp/error.hpp"
#include "voxlrp/metrics.hpp"
#include "voxlrp/preprocess.hpp"

namespace voxlrp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

class Section {
 public:
  Section(const json& j, std::string name) : j_(j), name_(std::move(name)) {
    require(j.is_object(), ErrorCode::Schema, "config: '" + name_ + "' must be an object");
  }

  template <typename T>
  void read(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      fail(ErrorCode::Schema, "config: " + name_ + "." + key + ": " + e.what());
    }
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) fail(ErrorCode::Schema, "config: unknown key '" + name_ + "." + k + "'");
    }
  }

 private:
  const json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

const json& section(const json& root, const char* name) {
  static const json empty = json::object();
  return root.contains(name) ? root.at(name) : empty;
}

void write_json(const fs::path& p, const json& j) { write_text_file(p, j.dump(2) + "\n"); }

json read_json(const fs::path& p) {
  require(fs::exists(p), ErrorCode::NotFound, "missing " + p.string());
  try {
    return json::parse(read_text_file(p));
  } catch (const json::exception& e) {
    fail(ErrorCode::Schema, p.string() + ": " + e.what());
  }
}

fs::path stage_dir(const PipelineConfig& c, const char* name) {
  const fs::path d = c.out / name;
  fs::create_directories(d);
  return d;
}

void write_resolved(const PipelineConfig& c, const fs::path& dir) { write_json(dir / "config.json", config_to_json(c)); }

DatasetManifest manifest_of(const PipelineConfig& c) {
  const fs::path p = c.manifest_path();
  require(fs::exists(p), ErrorCode::NotFound, "missing manifest " + p.string() + " (run `voxlrp synth` first)");
  return load_manifest(p);
}

FoldSplit split_of(const PipelineConfig& c) {
  const fs::path p = c.out / "split" / "split.json";
  require(fs::exists(p), ErrorCode::NotFound, "missing " + p.string() + " (run `voxlrp split` first)");
  return load_fold_split(p);
}

// Runs fn(i) for i in [0, n); results must not depend on scheduling.
template <typename F>
void parallel_for(std::size_t n, std::size_t threads, F&& fn) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr err;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

json label_counts(const DatasetManifest& m) {
  json out = json::object();
  for (const auto& s : m.subjects) {
    const std::string k = to_string(s.label);
    out[k] = out.value(k, 0) + 1;
  }
  return out;
}

std::vector<double> softmax_of(const std::vector<double>& z) {
  const double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] - mx);
  for (double& v : p) v /= s;
  return p;
}

}  // namespace

// --- config --------------------------------------------------------------------------

fs::path PipelineConfig::manifest_path() const {
  return manifest.empty() ? out / "cohort" / "manifest.json" : fs::path(manifest);
}

ModelSpec PipelineConfig::model_spec(const Dims& dims) const {
  json j = model;
  if (!j.contains("input_dims")) j["input_dims"] = {dims.nx, dims.ny, dims.nz};
  return spec_from_json(j);
}

std::size_t PipelineConfig::thread_count() const {
  if (train.threads > 0) return train.threads;
  return std::max(1u, std::thread::hardware_concurrency());
}

void PipelineConfig::set_seed(std::uint64_t seed) {
  synth.seed = seed;
  split.seed = seed;
  train.train.seed = seed;
}

PipelineConfig config_from_json(const json& j) {
  require(j.is_object(), ErrorCode::Schema, "config: top level must be an object");
  for (const auto& [k, v] : j.items()) {
    static const std::set<std::string> known{"paths", "synth", "split", "model", "train", "lrp", "metrics", "serve"};
    require(known.count(k) == 1, ErrorCode::Schema, "config: unknown section '" + k + "'");
  }
  PipelineConfig c;
  {
    Section s(section(j, "paths"), "paths");
    std::string out = c.out.string();
    s.read("manifest", c.manifest);
    s.read("out", out);
    s.finish();
    c.out = out;
  }
  {
    Section s(section(j, "synth"), "synth");
    std::array<std::uint32_t, 3> d{c.synth.dims.nx, c.synth.dims.ny, c.synth.dims.nz};
    s.read("n_subjects", c.synth.n_subjects);
    s.read("dims", d);
    s.read("seed", c.synth.seed);
    s.read("noise_sigma", c.synth.noise_sigma);
    s.finish();
    c.synth.dims = {d[0], d[1], d[2]};
  }
  {
    Section s(section(j, "split"), "split");
    s.read("folds", c.split.folds);
    s.read("seed", c.split.seed);
    s.finish();
  }
  c.model = section(j, "model");
  require(c.model.is_object(), ErrorCode::Schema, "config: 'model' must be an object");
  c.model_spec(c.synth.dims);  // rejects unknown keys and invalid values early
  {
    Section s(section(j, "train"), "train");
    auto& t = c.train.train;
    s.read("epochs", t.epochs);
    s.read("batch_size", t.batch_size);
    s.read("lr0", t.lr0);
    s.read("decay", t.decay);
    s.read("adam_beta1", t.adam_beta1);
    s.read("adam_beta2", t.adam_beta2);
    s.read("adam_eps", t.adam_eps);
    s.read("seed", t.seed);
    s.read("augmentation_level", t.augmentation_level);
    s.read("residualize", t.residualize);
    s.read("threads", c.train.threads);
    s.read("holdout_fold", c.train.holdout_fold);
    s.finish();
    t.validate();
  }
  {
    Section s(section(j, "lrp"), "lrp");
    auto& e = c.explain;
    s.read("alpha", e.lrp.alpha);
    s.read("beta", e.lrp.beta);
    s.read("epsilon", e.lrp.epsilon);
    s.read("seed_scale", e.lrp.seed_scale);
    s.read("models", e.models);
    s.read("subjects", e.subjects);
    s.read("target_class", e.target_class);
    s.read("min_cluster", e.min_cluster);
    s.finish();
    e.lrp.validate();
    for (std::size_t k : e.min_cluster) require(k >= 1, ErrorCode::InvalidArgument, "lrp: min_cluster entries must be >= 1");
  }
  {
    Section s(section(j, "metrics"), "metrics");
    s.read("region", c.metrics.region);
    s.finish();
  }
  {
    Section s(section(j, "serve"), "serve");
    s.read("host", c.serve.host);
    s.read("port", c.serve.port);
    s.finish();
    require(c.serve.port >= 0 && c.serve.port <= 65535, ErrorCode::InvalidArgument, "serve: port out of range");
  }
  require(c.split.folds >= 2, ErrorCode::InvalidArgument, "split: folds must be at least 2");
  require(c.synth.n_subjects >= 1, ErrorCode::InvalidArgument, "synth: n_subjects must be positive");
  return c;
}

json config_to_json(const PipelineConfig& c) {
  const auto& t = c.train.train;
  const auto& e = c.explain;
  json train = train_config_to_json(t);
  train["threads"] = c.train.threads;
  train["holdout_fold"] = c.train.holdout_fold;
  return json{
      {"paths", {{"manifest", c.manifest}, {"out", c.out.string()}}},
      {"synth",
       {{"n_subjects", c.synth.n_subjects},
        {"dims", {c.synth.dims.nx, c.synth.dims.ny, c.synth.dims.nz}},
        {"seed", c.synth.seed},
        {"noise_sigma", c.synth.noise_sigma}}},
      {"split", {{"folds", c.split.folds}, {"seed", c.split.seed}}},
      {"model", spec_to_json(c.model_spec(c.synth.dims))},
      {"train", train},
      {"lrp",
       {{"alpha", e.lrp.alpha},
        {"beta", e.lrp.beta},
        {"epsilon", e.lrp.epsilon},
        {"seed_scale", e.lrp.seed_scale},
        {"models", e.models},
        {"subjects", e.subjects},
        {"target_class", e.target_class},
        {"min_cluster", e.min_cluster}}},
      {"metrics", {{"region", c.metrics.region}}},
      {"serve", {{"host", c.serve.host}, {"port", c.serve.port}}},
  };
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  require(fs::exists(path), ErrorCode::NotFound, "missing config " + path.string());
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::exception& e) {
    fail(ErrorCode::Schema, "config " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

// --- stages -----------------------------------------------------------------------------

json run_synth(const PipelineConfig& c) {
  CohortSpec spec;
  spec.n_subjects = c.synth.n_subjects;
  spec.dims = c.synth.dims;
  spec.seed = c.synth.seed;
  spec.lesion = default_lesion(spec.dims);
  spec.covariates.noise_sigma = c.synth.noise_sigma;
  const fs::path dir = c.manifest_path().parent_path();
  const DatasetManifest m = generate_synthetic_cohort(spec, dir);
  write_resolved(c, dir);
  return json{{"stage", "synth"}, {"manifest", c.manifest_path().string()}, {"subjects", m.subjects.size()},
              {"labels", label_counts(m)}};
}

json run_residualize(const PipelineConfig& c) {
  const DatasetManifest m = manifest_of(c);
  std::vector<std::size_t> nc;
  for (std::size_t i = 0; i < m.subjects.size(); ++i) {
    if (m.subjects[i].label == Diagnosis::NC) nc.push_back(i);
  }
  const ResidualModel rm = fit_residual_model(m, nc);
  const fs::path dir = stage_dir(c, "residual");
  save_residual_model(rm, dir / "model.voxw");
  for (const auto& s : m.subjects) write_volume(residualize(rm, s, m.load_volume(s)), dir / "volumes" / (s.id + ".voxw"));
  write_resolved(c, dir);
  return json{{"stage", "residualize"}, {"fit_population", nc.size()}, {"volumes", m.subjects.size()}};
}

json run_split(const PipelineConfig& c) {
  const DatasetManifest m = manifest_of(c);
  const FoldSplit split = stratified_kfold(m, c.split.folds, c.split.seed);
  const fs::path dir = stage_dir(c, "split");
  save_fold_split(split, dir / "split.json");
  write_resolved(c, dir);
  json sizes = json::array();
  for (std::size_t f = 0; f < split.fold_count; ++f) sizes.push_back(split.fold_members(f).size());
  return json{{"stage", "split"}, {"folds", split.fold_count}, {"fold_sizes", sizes}};
}

json run_train(const PipelineConfig& c) {
  const DatasetManifest m = manifest_of(c);
  const FoldSplit split = split_of(c);
  const std::size_t h = c.train.holdout_fold;
  require(h < split.fold_count, ErrorCode::InvalidArgument, "train: holdout_fold outside the split");
  const ModelSpec spec = c.model_spec(m.dims);
  const TrainConfig& tc = c.train.train;

  const std::size_t n = m.subjects.size();
  std::vector<Volume3D> raw;
  raw.reserve(n);
  for (const auto& s : m.subjects) raw.push_back(m.load_volume(s));
  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < n; ++i) {
    const auto it = split.assignments.find(m.subjects[i].id);
    require(it != split.assignments.end(), ErrorCode::Precondition, "train: subject " + m.subjects[i].id + " has no fold");
    (it->second == h ? val_idx : train_idx).push_back(i);
  }
  require(!train_idx.empty() && !val_idx.empty(), ErrorCode::Precondition, "train: empty training or holdout set");

  std::optional<ResidualModel> rm;
  std::vector<Volume3D> inputs;
  if (tc.residualize) {
    std::vector<SubjectRecord> subs;
    std::vector<Volume3D> vols;
    for (std::size_t i : train_idx) {
      if (m.subjects[i].label != Diagnosis::NC) continue;
      subs.push_back(m.subjects[i]);
      vols.push_back(raw[i]);
    }
    rm = fit_residual_model(subs, vols);
    for (std::size_t i = 0; i < n; ++i) inputs.push_back(residualize(*rm, m.subjects[i], raw[i]));
  } else {
    inputs = raw;
  }
  std::vector<int> train_labels, val_labels;
  for (std::size_t i : train_idx) train_labels.push_back(binary_label(m.subjects[i].label));
  for (std::size_t i : val_idx) val_labels.push_back(binary_label(m.subjects[i].label));
  const auto samples = make_augmented_training_set(train_idx, train_labels, AugmentationLevel(tc.augmentation_level));

  FoldResult r = train_fold(spec, inputs, samples, val_idx, val_labels, tc);
  r.model.train_meta["holdout_fold"] = h;

  const fs::path dir = stage_dir(c, "train");
  save_model(r.model, dir / "model.voxm");
  if (rm) save_residual_model(*rm, dir / "residual.voxw");
  write_json(dir / "log.json", r.log.to_json());
  json val_ids = json::array();
  std::vector<Diagnosis> diag;
  for (std::size_t i : val_idx) {
    val_ids.push_back(m.subjects[i].id);
    diag.push_back(m.subjects[i].label);
  }
  const json report{{"holdout_fold", h},
                    {"final_val_accuracy", r.model.train_meta["final_val_accuracy"]},
                    {"final_val_loss", r.model.train_meta["final_val_loss"]},
                    {"auc", auc_subsplits(r.val_scores, diag).to_json()},
                    {"val_subjects", val_ids},
                    {"val_scores", r.val_scores},
                    {"val_predictions", r.val_predictions},
                    {"val_truth", val_labels}};
  write_json(dir / "report.json", report);
  write_resolved(c, dir);
  return json{{"stage", "train"}, {"holdout_fold", h}, {"final_val_accuracy", report["final_val_accuracy"]}};
}

json run_cv_stage(const PipelineConfig& c) {
  const DatasetManifest m = manifest_of(c);
  const FoldSplit split = split_of(c);
  const ModelSpec spec = c.model_spec(m.dims);
  const fs::path dir = stage_dir(c, "cv");
  CvOptions opt;
  opt.threads = c.thread_count();
  opt.out_dir = dir;
  const CvReport rep = run_cv(spec, m, split, c.train.train, opt);
  write_json(dir / "report.json", rep.to_json());
  for (const char* which : {"val_accuracy", "val_loss", "train_loss"}) {
    write_text_file(dir / (std::string("curve_") + which + ".csv"), rep.curve_csv(which));
  }
  write_resolved(c, dir);
  return json{{"stage", "cv"},
              {"folds", rep.folds.size()},
              {"mean_val_accuracy", rep.accuracy.mean},
              {"sd_val_accuracy", rep.accuracy.sd},
              {"best_model", rep.best_model_id}};
}

fs::path relevance_path(const fs::path& out, const std::string& model, const std::string& subject,
                        std::size_t min_cluster) {
  const std::string name = min_cluster == 0 ? subject + ".voxw" : subject + ".c" + std::to_string(min_cluster) + ".voxw";
  return out / "explain" / model / name;
}

std::vector<double> cluster_filtered(const RelevanceMap& map, std::size_t min_size) {
  const BinaryMask keep = filter_clusters(binarize_positive(map), min_size);
  std::vector<double> v(map.values.size(), 0.0);
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (keep[i]) v[i] = map.values[i];
  }
  return v;
}

namespace {

struct ResolvedModel {
  std::string id;
  fs::path dir;
  std::string source;
  std::vector<std::string> aliases;
};

std::vector<ResolvedModel> resolve_models(const PipelineConfig& c) {
  std::vector<ResolvedModel> out;
  for (const auto& name : c.explain.models) {
    ResolvedModel r;
    if (name == "best") {
      r.id = read_json(c.out / "cv" / "report.json").at("best_model").get<std::string>();
      r.source = "cv/" + r.id;
    } else if (name == "train") {
      r.id = "train";
      r.source = "train";
    } else if (name.rfind("fold-", 0) == 0) {
      r.id = name;
      r.source = "cv/" + name;
    } else {
      fail(ErrorCode::InvalidArgument, "lrp: unknown model '" + name + "' (use best, train or fold-XX)");
    }
    r.dir = c.out / r.source;
    require(fs::exists(r.dir / "model.voxm"), ErrorCode::NotFound, "missing model " + (r.dir / "model.voxm").string());
    auto same = std::find_if(out.begin(), out.end(), [&](const ResolvedModel& o) { return o.id == r.id; });
    if (same == out.end()) {
      r.aliases.push_back(name);
      out.push_back(std::move(r));
    } else if (std::find(same->aliases.begin(), same->aliases.end(), name) == same->aliases.end()) {
      same->aliases.push_back(name);
    }
  }
  return out;
}

}  // namespace

json run_explain(const PipelineConfig& c) {
  const DatasetManifest m = manifest_of(c);
  const auto& ec = c.explain;
  ec.lrp.validate();
  std::vector<std::size_t> subjects;
  if (ec.subjects.empty()) {
    for (std::size_t i = 0; i < m.subjects.size(); ++i) subjects.push_back(i);
  } else {
    for (const auto& id : ec.subjects) {
      const auto i = m.find(id);
      require(i.has_value(), ErrorCode::NotFound, "explain: unknown subject " + id);
      subjects.push_back(*i);
    }
  }
  const auto models = resolve_models(c);
  const fs::path dir = stage_dir(c, "explain");
  std::vector<Volume3D> raw(subjects.size());
  for (std::size_t k = 0; k < subjects.size(); ++k) raw[k] = m.load_volume(m.subjects[subjects[k]]);

  json index_models = json::array();
  for (const auto& rmod : models) {
    const TrainedModel model = load_model(rmod.dir / "model.voxm");
    require(model.spec.input_dims == m.dims, ErrorCode::DimMismatch, "explain: model " + rmod.id + " expects other dims");
    require(ec.target_class >= 0 && ec.target_class < model.spec.n_classes, ErrorCode::InvalidArgument,
            "explain: target_class outside the model's classes");
    const TrainedModel canon = canonicalize(model);
    std::optional<ResidualModel> rm;
    if (fs::exists(rmod.dir / "residual.voxw")) rm = load_residual_model(rmod.dir / "residual.voxw");

    std::vector<json> rows(subjects.size());
    parallel_for(subjects.size(), c.thread_count(), [&](std::size_t k) {
      const SubjectRecord& s = m.subjects[subjects[k]];
      const Volume3D input = rm ? residualize(*rm, s, raw[k]) : raw[k];
      RelevanceMap map = lrp_relevance(canon, input, ec.target_class, ec.lrp);
      map.subject_id = s.id;
      map.model_id = rmod.id;
      // Everything downstream sees the stored f32 values.
      for (double& v : map.values) v = static_cast<double>(static_cast<float>(v));
      save_relevance_map(map, relevance_path(c.out, rmod.id, s.id));
      for (std::size_t mc : ec.min_cluster) {
        const auto f = cluster_filtered(map, mc);
        write_volume(Volume3D(map.dims, std::vector<float>(f.begin(), f.end())), relevance_path(c.out, rmod.id, s.id, mc));
      }
      const auto logits = predict_logits(model, input);
      const auto prob = softmax_of(logits);
      const int pred = static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
      double absorbed = 0.0;
      for (const auto& l : map.layers) absorbed += l.absorbed;
      rows[k] = json{{"subject", s.id},      {"label", to_string(s.label)}, {"logits", logits},
                     {"probability", prob},  {"predicted", pred},           {"relevance_sum", map.sum()},
                     {"absorbed", absorbed}};
    });
    write_json(dir / rmod.id / "predictions.json", json(rows));
    json entry{{"id", rmod.id},
               {"aliases", rmod.aliases},
               {"source", rmod.source},
               {"residualized", rm.has_value()},
               {"spec", spec_to_json(model.spec)}};
    if (model.train_meta.contains("final_val_accuracy")) {
      entry["final_val_accuracy"] = model.train_meta["final_val_accuracy"];
    }
    if (model.train_meta.contains("fold")) entry["fold"] = model.train_meta["fold"];
    index_models.push_back(entry);
  }
  json ids = json::array();
  for (std::size_t i : subjects) ids.push_back(m.subjects[i].id);
  write_json(dir / "index.json", json{{"target_class", ec.target_class},
                                      {"min_cluster", ec.min_cluster},
                                      {"subjects", ids},
                                      {"models", index_models}});
  write_resolved(c, dir);
  json model_ids = json::array();
  for (const auto& r : models) model_ids.push_back(r.id);
  return json{{"stage", "explain"}, {"models", model_ids}, {"subjects", subjects.size()}};
}

json run_metrics(const PipelineConfig& c) {
  const DatasetManifest m = manifest_of(c);
  const fs::path dir = stage_dir(c, "metrics");
  json summary = json::object();

  // Classification over the pooled cross-validation predictions.
  const fs::path cv_report = c.out / "cv" / "report.json";
  if (fs::exists(cv_report)) {
    const json rep = read_json(cv_report);
    std::vector<int> truth, pred;
    std::vector<double> scores;
    std::vector<Diagnosis> diag;
    json per_fold = json::array();
    for (const auto& f : rep.at("folds")) {
      const auto ids = f.at("val_subjects").get<std::vector<std::string>>();
      const auto t = f.at("val_truth").get<std::vector<int>>();
      const auto p = f.at("val_predictions").get<std::vector<int>>();
      const auto s = f.at("val_scores").get<std::vector<double>>();
      for (std::size_t i = 0; i < ids.size(); ++i) {
        truth.push_back(t[i]);
        pred.push_back(p[i]);
        scores.push_back(s[i]);
        diag.push_back(m.subject(ids[i]).label);
      }
      per_fold.push_back({{"model", f.at("model")}, {"auc", f.at("auc")}});
    }
    const auto [cm, cr] = confusion_and_report(truth, pred);
    write_json(dir / "classification_report.json", cr.to_json());
    write_text_file(dir / "classification_report.txt", cr.to_text());
    std::ostringstream csv;
    csv << "truth\\predicted," << cm.classes[0] << "," << cm.classes[1] << "\n";
    for (std::size_t i = 0; i < cm.counts.size(); ++i) {
      csv << cm.classes[i];
      for (std::size_t v : cm.counts[i]) csv << "," << v;
      csv << "\n";
    }
    write_text_file(dir / "confusion.csv", csv.str());
    const AucSplits pooled = auc_subsplits(scores, diag);
    write_json(dir / "auc.json", json{{"pooled", pooled.to_json()}, {"per_fold", per_fold}});
    const auto& acc = rep.at("accuracy");
    std::string best = rep.at("best_model").get<std::string>();
    double best_acc = 0.0;
    for (const auto& f : rep.at("folds")) {
      if (f.at("model") == best) best_acc = f.at("final_accuracy").get<double>();
    }
    summary["cv"] = {
        {"mean_val_accuracy",
         {{"value", acc.at("mean")},
          {"sd", acc.at("sd")},
          {"provenance", "mean over " + std::to_string(rep.at("folds").size()) + " validation folds"}}},
        {"best_val_accuracy", {{"value", best_acc}, {"provenance", best + " validation"}}},
        {"pooled_accuracy", cr.accuracy},
        {"pooled_auc", pooled.to_json()},
    };
  }

  // Relevance statistics for every explained model.
  const fs::path index_path = c.out / "explain" / "index.json";
  if (fs::exists(index_path)) {
    const json index = read_json(index_path);
    const BinaryMask region = m.load_mask(c.metrics.region);
    const auto ids = index.at("subjects").get<std::vector<std::string>>();
    const std::size_t nvox = m.dims.voxel_count();
    const double region_fraction = static_cast<double>(region.count()) / static_cast<double>(nvox);
    std::vector<double> volume(ids.size());
    for (std::size_t k = 0; k < ids.size(); ++k) volume[k] = region_intensity_sum(m.load_volume(m.subject(ids[k])), region);

    json models = json::object();
    json region_stats = json::object();
    std::vector<std::string> labels;
    std::vector<BinaryMask> masks;
    for (const auto& entry : index.at("models")) {
      const std::string id = entry.at("id").get<std::string>();
      const json preds = read_json(c.out / "explain" / id / "predictions.json");
      RelevanceMap mean;
      mean.dims = m.dims;
      mean.model_id = id;
      mean.values.assign(nvox, 0.0);
      std::vector<double> aggregate(ids.size()), fraction(ids.size());
      std::vector<double> ad_fraction;
      for (std::size_t k = 0; k < ids.size(); ++k) {
        const RelevanceMap map = load_relevance_map(relevance_path(c.out, id, ids[k]));
        require(map.dims == m.dims, ErrorCode::DimMismatch, "metrics: map dims differ from the cohort");
        for (std::size_t i = 0; i < nvox; ++i) mean.values[i] += map.values[i];
        aggregate[k] = region_relevance_stats(map, region).aggregate_relevance;
        fraction[k] = positive_mass_fraction(map, region);
        if (preds.at(k).at("predicted").get<int>() == 1) ad_fraction.push_back(fraction[k]);
      }
      for (double& v : mean.values) v /= static_cast<double>(ids.size());

      json mj;
      if (entry.contains("final_val_accuracy")) {
        mj["accuracy"] = {{"value", entry["final_val_accuracy"]}, {"provenance", entry.at("source").get<std::string>() + " validation"}};
      }
      try {
        const CorrelationResult r = pearson(aggregate, volume);
        mj["pearson_rho"] = r.rho;
        mj["pearson_n"] = r.n;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::Undefined && e.code() != ErrorCode::Precondition) throw;
        mj["pearson_rho"] = nullptr;
        mj["pearson_error"] = e.what();
      }
      std::ostringstream scatter;
      scatter.precision(17);
      scatter << "subject,aggregate_relevance,region_volume\n";
      for (std::size_t k = 0; k < ids.size(); ++k) scatter << ids[k] << "," << aggregate[k] << "," << volume[k] << "\n";
      write_text_file(dir / ("correlation_" + id + ".csv"), scatter.str());

      mj["region_volume_fraction"] = region_fraction;
      mj["ad_predicted"] = ad_fraction.size();
      if (!ad_fraction.empty()) {
        const double mf = mean_sd(ad_fraction).mean;
        mj["mass_fraction_ad_predicted"] = mf;
        mj["mass_to_volume_ratio"] = mf / region_fraction;
      } else {
        mj["mass_fraction_ad_predicted"] = nullptr;
        mj["mass_to_volume_ratio"] = nullptr;
      }
      const RegionStats rs = region_relevance_stats(mean, region);
      region_stats[id] = {{"aggregate_relevance", rs.aggregate_relevance},
                          {"volume_ratio", rs.volume_ratio},
                          {"volume_ratio_percent", format_percent(rs.volume_ratio)},
                          {"region_voxels", rs.region_voxels}};
      labels.push_back(id);
      masks.push_back(binarize_positive(mean));
      models[id] = mj;
    }
    write_json(dir / "region_stats.json", region_stats);
    labels.push_back(c.metrics.region);
    masks.push_back(region);
    try {
      write_text_file(dir / "dice_matrix.csv", matrix_to_csv(labels, pairwise_dice_matrix(masks)));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::Undefined) throw;
      summary["dice_error"] = e.what();
    }
    summary["models"] = models;
  }

  const auto grid = experiment_grid();
  const auto paper = paper_parameter_counts();
  json rows = json::array();
  for (const auto& g : grid) {
    const ParameterCount pc = count_parameters(g.spec);
    const ParameterCount alloc = count_allocated(build_model(g.spec, 0).weights);
    rows.push_back({{"name", g.name},
                    {"spec", spec_to_json(g.spec)},
                    {"trainable", pc.trainable},
                    {"non_trainable", pc.non_trainable},
                    {"total", pc.total()},
                    {"allocated_total", alloc.total()}});
  }
  json paper_rows = json::array();
  for (const auto& p : paper) {
    paper_rows.push_back({{"name", p.name}, {"published", p.published}, {"computed_total", p.computed.total()},
                          {"computed_trainable", p.computed.trainable}});
  }
  write_json(dir / "parameters.json", json{{"grid", rows}, {"paper", paper_rows}});
  write_text_file(dir / "parameters.txt", parameter_report_text(grid, paper));

  write_json(dir / "summary.json", summary);
  write_resolved(c, dir);
  return json{{"stage", "metrics"}, {"summary", summary}};
}

// --- parameter grid ----------------------------------------------------------------------

std::vector<GridEntry> experiment_grid(const Dims& dims) {
  auto make = [&](int blocks, int filters, DropoutPlacement p, int fc, Dims d) {
    ModelSpec s;
    s.n_blocks = blocks;
    s.filters = filters;
    s.dropout_placement = p;
    s.n_fc_layers = fc;
    s.input_dims = d;
    return s;
  };
  const auto each = DropoutPlacement::AfterEachBlock;
  const auto all = DropoutPlacement::AfterAllBlocks;
  const Dims whole{89, 111, 94};
  return {
      {"3 blocks, dropout after each block", make(3, 5, each, 1, dims)},
      {"3 blocks, dropout after all blocks", make(3, 5, all, 1, dims)},
      {"4 blocks", make(4, 5, all, 1, dims)},
      {"5 blocks", make(5, 5, all, 1, dims)},
      {"5 blocks, 10 filters", make(5, 10, all, 1, dims)},
      {"5 blocks, 20 filters", make(5, 20, all, 1, dims)},
      {"5 blocks, 30 filters", make(5, 30, all, 1, dims)},
      {"5 blocks, 60 filters", make(5, 60, all, 1, dims)},
      {"5 blocks, 2 FC layers", make(5, 5, all, 2, dims)},
      {"5 blocks, 3 FC layers", make(5, 5, all, 3, dims)},
      {"whole brain, 3 blocks, 5 filters", make(3, 5, all, 1, whole)},
      {"whole brain, 5 blocks, 20 filters", make(5, 20, all, 1, whole)},
  };
}

PaperCount paper_count(std::string name, ModelSpec spec, std::string published) {
  PaperCount p{std::move(name), spec, std::move(published), count_parameters(spec)};
  return p;
}

std::vector<PaperCount> paper_parameter_counts() {
  auto spec = [](int blocks, int filters, Dims d) {
    ModelSpec s;
    s.n_blocks = blocks;
    s.filters = filters;
    s.input_dims = d;
    return s;
  };
  const Dims sub{89, 32, 94}, whole{89, 111, 94};
  return {
      paper_count("3 blocks / 5 filters, sub-volume 89x32x94", spec(3, 5, sub), "6,402"),
      paper_count("3 blocks / 5 filters, whole brain 89x111x94", spec(3, 5, whole), "17,292"),
      paper_count("5 blocks / 10 filters, sub-volume 89x32x94", spec(5, 10, sub), "11,402 (conclusion)"),
      paper_count("5 blocks / 20 filters, sub-volume 89x32x94", spec(5, 20, sub), "44,402 (conclusion)"),
      paper_count("5 blocks / 20 filters, whole brain 89x111x94", spec(5, 20, whole), "44,722 (appendix)"),
  };
}

std::string parameter_report_text(const std::vector<GridEntry>& grid, const std::vector<PaperCount>& paper) {
  std::ostringstream os;
  char line[200];
  std::snprintf(line, sizeof line, "%-40s %10s %14s %10s\n", "spec", "trainable", "non-trainable", "total");
  os << line;
  for (const auto& g : grid) {
    const ParameterCount pc = count_parameters(g.spec);
    std::snprintf(line, sizeof line, "%-40s %10zu %14zu %10zu\n", g.name.c_str(), pc.trainable, pc.non_trainable,
                  pc.total());
    os << line;
  }
  os << "\npublished vs computed (total incl. batch-norm running statistics, floor pooling)\n";
  for (const auto& p : paper) {
    std::snprintf(line, sizeof line, "%-46s published %-20s computed %zu\n", p.name.c_str(), p.published.c_str(),
                  p.computed.total());
    os << line;
  }
  return os.str();
}

}  // namespace voxlrp
