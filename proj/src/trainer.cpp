#include "voxlrp/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "voxlrp/error.hpp"

namespace voxlrp {

using nlohmann::json;

void TrainConfig::validate() const {
  require(epochs >= 0, ErrorCode::InvalidArgument, "train: epochs must be nonnegative");
  require(batch_size >= 1, ErrorCode::InvalidArgument, "train: batch_size must be at least 1");
  require(lr0 > 0.0, ErrorCode::InvalidArgument, "train: lr0 must be positive");
  require(decay >= 0.0, ErrorCode::InvalidArgument, "train: decay must be nonnegative");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0 && adam_eps > 0.0,
          ErrorCode::InvalidArgument, "train: invalid Adam hyperparameters");
  AugmentationLevel{augmentation_level};
}

json train_config_to_json(const TrainConfig& c) {
  return json{{"epochs", c.epochs},         {"batch_size", c.batch_size}, {"lr0", c.lr0},
              {"decay", c.decay},           {"adam_beta1", c.adam_beta1}, {"adam_beta2", c.adam_beta2},
              {"adam_eps", c.adam_eps},     {"seed", c.seed},             {"augmentation_level", c.augmentation_level},
              {"residualize", c.residualize}};
}

double lr_at(std::uint64_t iteration, double lr0, double decay) {
  return lr0 / (1.0 + decay * static_cast<double>(iteration));
}

template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, const std::vector<const Tensor<T>*>& grads,
               AdamState<T>& state, double lr, double beta1, double beta2, double eps) {
  require(params.size() == grads.size(), ErrorCode::ShapeMismatch, "adam_step: params and grads differ in count");
  if (state.m.empty()) {
    for (const auto* p : params) {
      state.m.emplace_back(p->size(), 0.0);
      state.v.emplace_back(p->size(), 0.0);
    }
  }
  require(state.m.size() == params.size(), ErrorCode::ShapeMismatch, "adam_step: state does not match params");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require(params[i]->shape() == grads[i]->shape() && state.m[i].size() == params[i]->size(),
            ErrorCode::ShapeMismatch, "adam_step: shape mismatch at tensor " + std::to_string(i));
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    T* p = params[i]->ptr();
    const T* g = grads[i]->ptr();
    double* m = state.m[i].data();
    double* v = state.v[i].data();
    for (std::size_t k = 0; k < params[i]->size(); ++k) {
      const double gk = g[k];
      m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
      v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
      const double mh = m[k] / c1, vh = v[k] / c2;
      p[k] = static_cast<T>(static_cast<double>(p[k]) - lr * mh / (std::sqrt(vh) + eps));
    }
  }
}

template void adam_step(const std::vector<Tensor<float>*>&, const std::vector<const Tensor<float>*>&,
                        AdamState<float>&, double, double, double, double);
template void adam_step(const std::vector<Tensor<double>*>&, const std::vector<const Tensor<double>*>&,
                        AdamState<double>&, double, double, double, double);

json TrainLog::to_json() const {
  json ep = json::array();
  for (const auto& e : epochs) {
    ep.push_back({{"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"val_accuracy", e.val_accuracy}});
  }
  return json{{"epochs", ep}, {"lr_trace", lr_trace}, {"degenerate_bn_steps", degenerate_bn_steps}};
}

namespace {

constexpr std::size_t kEvalBatch = 16;

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (std::uint64_t{words[1]} << 32) | words[0];
}

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<double> scores;
  std::vector<int> predictions;
};

Evaluation evaluate(const TrainedModel& model, std::span<const Volume3D> volumes, std::span<const std::size_t> val,
                    std::span<const int> labels, const TrainHooks& hooks) {
  Evaluation ev;
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < val.size(); start += kEvalBatch) {
    const std::size_t end = std::min(val.size(), start + kEvalBatch);
    std::vector<const Volume3D*> vols;
    for (std::size_t i = start; i < end; ++i) vols.push_back(&volumes[val[i]]);
    if (hooks.on_forward) hooks.on_forward("validate", Mode::Infer, false);
    const auto c = forward(model.spec, model.weights, model.bn_folded, volumes_to_batch(vols), Mode::Infer, nullptr);
    const std::span<const int> lab = labels.subspan(start, end - start);
    loss_sum += cross_entropy(c.logits, lab).loss * static_cast<double>(end - start);
    const TensorF prob = softmax(c.logits);
    const std::size_t K = c.logits.dim(1);
    for (std::size_t r = 0; r < end - start; ++r) {
      const float* row = c.logits.ptr() + r * K;
      const int pred = static_cast<int>(std::max_element(row, row + K) - row);
      ev.predictions.push_back(pred);
      ev.scores.push_back(prob[r * K + 1]);
      correct += pred == lab[r];
    }
  }
  ev.loss = loss_sum / static_cast<double>(val.size());
  ev.accuracy = static_cast<double>(correct) / static_cast<double>(val.size());
  return ev;
}

}  // namespace

FoldResult train_fold(const ModelSpec& spec, std::span<const Volume3D> volumes,
                      std::span<const AugmentedSample> train, std::span<const std::size_t> val,
                      std::span<const int> val_labels, const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  require(!train.empty(), ErrorCode::InvalidArgument, "train_fold: empty training set");
  require(!val.empty(), ErrorCode::InvalidArgument, "train_fold: empty validation set");
  require(val.size() == val_labels.size(), ErrorCode::InvalidArgument, "train_fold: one label per validation subject");
  for (const auto& s : train) {
    require(std::find(val.begin(), val.end(), s.subject) == val.end(), ErrorCode::Precondition,
            "train_fold: subject " + std::to_string(s.subject) + " is in both training and validation sets");
  }

  FoldResult r;
  r.model = build_model(spec, config.seed);
  std::mt19937_64 shuffle_rng(stream_seed(config.seed, 1));
  std::mt19937_64 dropout_rng(stream_seed(config.seed, 2));
  AdamState<float> adam;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::uint64_t iteration = 0;
  const std::size_t B = static_cast<std::size_t>(config.batch_size);
  std::vector<Volume3D> shifted;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += B) {
      const std::size_t end = std::min(order.size(), start + B);
      shifted.clear();
      std::vector<int> labels;
      for (std::size_t i = start; i < end; ++i) {
        const AugmentedSample& s = train[order[i]];
        shifted.push_back(shift_volume(volumes[s.subject], s.shift.dx, s.shift.dy, s.shift.dz));
        labels.push_back(s.label);
      }
      std::vector<const Volume3D*> ptrs;
      for (const auto& v : shifted) ptrs.push_back(&v);
      if (hooks.on_forward) hooks.on_forward("train", Mode::Train, spec.dropout_rate > 0.0);
      const auto cache = forward(spec, r.model.weights, false, volumes_to_batch(ptrs), Mode::Train, &dropout_rng);
      if (cache.degenerate_bn) ++r.log.degenerate_bn_steps;
      const auto loss = cross_entropy(cache.logits, labels);
      loss_sum += loss.loss * static_cast<double>(end - start);
      Weights<float> grads = backward(spec, r.model.weights, cache, loss.d_logits);
      const double lr = lr_at(iteration, config.lr0, config.decay);
      r.log.lr_trace.push_back(lr);
      adam_step(r.model.weights.trainable(), std::as_const(grads).trainable(), adam, lr, config.adam_beta1,
                config.adam_beta2, config.adam_eps);
      r.model.weights.bn_mean = std::move(grads.bn_mean);
      r.model.weights.bn_var = std::move(grads.bn_var);
      ++iteration;
    }
    const Evaluation ev = evaluate(r.model, volumes, val, val_labels, hooks);
    EpochStats st{loss_sum / static_cast<double>(order.size()), ev.loss, ev.accuracy};
    r.log.epochs.push_back(st);
    if (hooks.on_epoch) hooks.on_epoch(epoch, st);
  }
  const Evaluation final_ev = evaluate(r.model, volumes, val, val_labels, hooks);
  r.val_scores = final_ev.scores;
  r.val_predictions = final_ev.predictions;
  r.model.train_meta["train_config"] = train_config_to_json(config);
  r.model.train_meta["iterations"] = iteration;
  r.model.train_meta["final_val_accuracy"] = final_ev.accuracy;
  r.model.train_meta["final_val_loss"] = final_ev.loss;
  return r;
}

MeanSd mean_sd(std::span<const double> v) {
  require(!v.empty(), ErrorCode::InvalidArgument, "mean_sd: empty input");
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / n)};
}

std::string fold_model_id(std::size_t fold) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "fold-%02zu", fold);
  return buf;
}

json CvReport::to_json() const {
  json folds_j = json::array();
  for (const auto& f : folds) {
    folds_j.push_back({{"fold", f.fold},
                       {"model", f.model_id},
                       {"final_accuracy", f.final_accuracy},
                       {"auc", f.auc.to_json()},
                       {"val_subjects", f.val_ids},
                       {"val_scores", f.result.val_scores},
                       {"val_predictions", f.result.val_predictions},
                       {"val_truth", f.val_truth}});
  }
  auto curve = [](const std::vector<MeanSd>& c) {
    json out = json::array();
    for (const auto& m : c) out.push_back({{"mean", m.mean}, {"sd", m.sd}});
    return out;
  };
  return json{{"fold_count", folds.size()},
              {"accuracy", {{"mean", accuracy.mean}, {"sd", accuracy.sd}, {"sd_convention", "population"}}},
              {"pooled_auc", pooled_auc.to_json()},
              {"best_model", best_model_id},
              {"folds", folds_j},
              {"curves",
               {{"val_accuracy", curve(val_accuracy_curve)},
                {"val_loss", curve(val_loss_curve)},
                {"train_loss", curve(train_loss_curve)}}}};
}

std::string CvReport::curve_csv(const std::string& which) const {
  const std::vector<MeanSd>* c = which == "val_accuracy" ? &val_accuracy_curve
                                 : which == "val_loss"   ? &val_loss_curve
                                 : which == "train_loss" ? &train_loss_curve
                                                         : nullptr;
  require(c != nullptr, ErrorCode::InvalidArgument, "curve_csv: unknown curve '" + which + "'");
  std::ostringstream os;
  os.precision(17);
  os << "epoch,mean,sd\n";
  for (std::size_t e = 0; e < c->size(); ++e) os << e + 1 << "," << (*c)[e].mean << "," << (*c)[e].sd << "\n";
  return os.str();
}

CvReport run_cv(const ModelSpec& spec, const DatasetManifest& manifest, const FoldSplit& folds,
                const TrainConfig& config, const CvOptions& options) {
  config.validate();
  require(spec.input_dims == manifest.dims, ErrorCode::DimMismatch,
          "run_cv: model input " + to_string(spec.input_dims) + " differs from cohort dims " + to_string(manifest.dims));
  const std::size_t n = manifest.subjects.size();
  for (const auto& s : manifest.subjects) {
    require(folds.assignments.count(s.id) == 1, ErrorCode::Precondition, "run_cv: subject " + s.id + " has no fold");
  }
  require(folds.assignments.size() == n, ErrorCode::Precondition, "run_cv: split names subjects not in the manifest");

  std::vector<Volume3D> raw;
  raw.reserve(n);
  for (const auto& s : manifest.subjects) raw.push_back(manifest.load_volume(s));
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = binary_label(manifest.subjects[i].label);

  const std::size_t k = folds.fold_count;
  std::vector<FoldOutcome> outcomes(k);
  auto run_one = [&](std::size_t f) {
    FoldOutcome& out = outcomes[f];
    out.fold = f;
    out.model_id = fold_model_id(f);
    std::vector<std::size_t> train_idx, val_idx;
    for (std::size_t i = 0; i < n; ++i) {
      (folds.assignments.at(manifest.subjects[i].id) == f ? val_idx : train_idx).push_back(i);
    }
    std::vector<Volume3D> inputs;
    const std::span<const Volume3D> used = [&]() -> std::span<const Volume3D> {
      if (!config.residualize) return raw;
      std::vector<SubjectRecord> subs;
      std::vector<Volume3D> vols;
      for (std::size_t i : train_idx) {
        if (manifest.subjects[i].label != Diagnosis::NC) continue;
        subs.push_back(manifest.subjects[i]);
        vols.push_back(raw[i]);
      }
      out.residual = fit_residual_model(subs, vols);
      inputs.reserve(n);
      for (std::size_t i = 0; i < n; ++i) inputs.push_back(residualize(*out.residual, manifest.subjects[i], raw[i]));
      return inputs;
    }();
    std::vector<int> train_labels;
    for (std::size_t i : train_idx) train_labels.push_back(labels[i]);
    const auto samples = make_augmented_training_set(train_idx, train_labels, AugmentationLevel(config.augmentation_level));
    for (std::size_t i : val_idx) {
      out.val_ids.push_back(manifest.subjects[i].id);
      out.val_truth.push_back(labels[i]);
      out.val_diagnosis.push_back(manifest.subjects[i].label);
    }
    TrainConfig fold_cfg = config;
    fold_cfg.seed = config.seed + f;
    out.result = train_fold(spec, used, samples, val_idx, out.val_truth, fold_cfg);
    out.result.model.train_meta["fold"] = f;
    out.final_accuracy = out.result.model.train_meta["final_val_accuracy"].get<double>();
    out.auc = auc_subsplits(out.result.val_scores, out.val_diagnosis);
    if (options.out_dir) {
      const auto dir = *options.out_dir / out.model_id;
      save_model(out.result.model, dir / "model.voxm");
      if (out.residual) save_residual_model(*out.residual, dir / "residual.voxw");
      write_text_file(dir / "log.json", out.result.log.to_json().dump(2) + "\n");
    }
  };

  const std::size_t threads = std::max<std::size_t>(1, std::min(options.threads, k));
  if (threads == 1) {
    for (std::size_t f = 0; f < k; ++f) run_one(f);
  } else {
    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr err;
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t f = next++; f < k; f = next++) {
          try {
            run_one(f);
          } catch (...) {
            std::lock_guard<std::mutex> lock(err_mu);
            if (!err) err = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    if (err) std::rethrow_exception(err);
  }

  CvReport rep;
  rep.folds = std::move(outcomes);
  std::vector<double> acc;
  for (const auto& f : rep.folds) acc.push_back(f.final_accuracy);
  rep.accuracy = mean_sd(acc);
  for (int e = 0; e < config.epochs; ++e) {
    std::vector<double> va, vl, tl;
    for (const auto& f : rep.folds) {
      const auto& st = f.result.log.epochs[static_cast<std::size_t>(e)];
      va.push_back(st.val_accuracy);
      vl.push_back(st.val_loss);
      tl.push_back(st.train_loss);
    }
    rep.val_accuracy_curve.push_back(mean_sd(va));
    rep.val_loss_curve.push_back(mean_sd(vl));
    rep.train_loss_curve.push_back(mean_sd(tl));
  }
  std::vector<double> scores;
  std::vector<Diagnosis> truth;
  for (const auto& f : rep.folds) {
    scores.insert(scores.end(), f.result.val_scores.begin(), f.result.val_scores.end());
    truth.insert(truth.end(), f.val_diagnosis.begin(), f.val_diagnosis.end());
  }
  rep.pooled_auc = auc_subsplits(scores, truth);
  std::size_t best = 0;
  for (std::size_t f = 1; f < rep.folds.size(); ++f) {
    if (rep.folds[f].final_accuracy > rep.folds[best].final_accuracy) best = f;
  }
  rep.best_model_id = rep.folds[best].model_id;
  return rep;
}

}  // namespace voxlrp
