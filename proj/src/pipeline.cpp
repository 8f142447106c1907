#include "depthseq/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <sstream>
#include <thread>

#include "depthseq/errors.hpp"

namespace depthseq {

using tc::Tensor;

void TrainConfig::check() const {
  model.check();
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ValidationError("lr must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ValidationError("momentum must be in [0, 1)");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (max_epochs < 1) throw ValidationError("max_epochs must be >= 1");
  if (patience < 1) throw ValidationError("patience must be >= 1");
  if (k_folds < 2 || fold >= k_folds) throw ValidationError("fold must be in [0, k_folds)");
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("train config must be a JSON object");
  TrainConfig c;
  try {
    nlohmann::json model = j.value("model", nlohmann::json::object());
    for (const char* key : {"padding_side", "attention_enabled"}) {
      if (j.contains(key)) model[key] = j[key];
    }
    c.model = config_from_json(model);
    const std::string task = j.value("task", std::string("localization"));
    if (task == "localization") {
      c.task = Task::Localization;
    } else if (task == "classification") {
      c.task = Task::Classification;
    } else {
      throw ValidationError("task must be localization or classification");
    }
    c.lr = j.value("lr", c.lr);
    c.momentum = j.value("momentum", c.momentum);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    c.seed = j.value("seed", c.seed);
    c.k_folds = j.value("k_folds", c.k_folds);
    c.fold = j.value("fold", c.fold);
    c.fold_seed = j.value("fold_seed", c.fold_seed);
    c.manifest = j.value("manifest", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad train config: ") + e.what());
  }
  c.check();
  return c;
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["model"] = to_json(c.model);
  j["task"] = c.task == Task::Localization ? "localization" : "classification";
  j["lr"] = c.lr;
  j["momentum"] = c.momentum;
  j["batch_size"] = c.batch_size;
  j["max_epochs"] = c.max_epochs;
  j["patience"] = c.patience;
  j["seed"] = c.seed;
  j["k_folds"] = c.k_folds;
  j["fold"] = c.fold;
  j["fold_seed"] = c.fold_seed;
  j["manifest"] = c.manifest.generic_string();
  return j;
}

nlohmann::json to_json(const TrainReport& r) {
  nlohmann::json j;
  j["train_loss"] = r.train_loss;
  j["val_loss"] = r.val_loss;
  j["val_metric"] = r.val_metric;
  j["best_epoch"] = r.best_epoch;
  j["best_val_metric"] = r.best_val_metric;
  j["epochs_run"] = r.epochs_run;
  j["checkpoint"] = r.checkpoint_path;
  return j;
}

Dataset load_dataset(const Manifest& m) {
  Dataset ds;
  for (const auto& e : m.cases) {
    PhantomCase c;
    c.case_id = e.case_id;
    c.volume = load_volume(e.volume);
    if (!e.calc_mask.empty()) {
      c.calc_mask = load_mask(e.calc_mask);
      if (c.calc_mask.dims != c.volume.dims()) throw ValidationError("case " + e.case_id + ": mask dims differ");
    } else {
      c.calc_mask = BinaryMask(c.volume.dims());
    }
    c.landmarks = e.landmarks;
    if (!c.landmarks.empty()) check_landmarks(c.landmarks, c.volume.dims()[2]);
    c.class_label = e.class_label;
    ds.push_back(std::move(c));
  }
  return ds;
}

std::vector<std::size_t> select_cases(const Dataset& ds, const std::vector<std::string>& ids) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < ds.size(); ++i) index[ds[i].case_id] = i;
  std::vector<std::size_t> out;
  for (const auto& id : ids) {
    auto it = index.find(id);
    if (it == index.end()) throw ValidationError("missing case " + id);
    out.push_back(it->second);
  }
  return out;
}

Model frozen_copy(const Model& m) {
  Model f;
  f.config = m.config;
  f.init_scheme = m.init_scheme;
  for (const auto& [name, t] : m.params) {
    f.params.emplace(name, Tensor::from(t.shape(), std::vector<double>(t.values().begin(), t.values().end())));
  }
  return f;
}

namespace {

Tensor input_of(const PhantomCase& c) { return volumes_to_input({&c.volume}); }

std::size_t label_of(const PhantomCase& c) {
  if (!c.class_label) throw ValidationError("case " + c.case_id + " has no class label");
  return *c.class_label;
}

Tensor task_loss(const ModelOutput& out, Task task, const PhantomCase& c) {
  if (task == Task::Localization) return loss_loc(out, {c.landmarks});
  return loss_cls(out.cls_logits, {label_of(c)});
}

std::size_t argmax_row(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

struct ValStats {
  double loss = 0.0;
  double metric = 0.0;
};

ValStats validate_model(const Model& m, Task task, const Dataset& ds, const std::vector<std::size_t>& idx,
                        const std::vector<Tensor>& inputs) {
  ValStats s;
  const Model f = frozen_copy(m);
  for (std::size_t i : idx) {
    const ModelOutput out = forward(f, inputs[i]);
    s.loss += task_loss(out, task, ds[i]).item();
    if (task == Task::Localization) {
      s.metric += mae(argmax_prediction(out.prediction(0)), ds[i].landmarks);
    } else {
      s.metric += argmax_row(out.cls_logits.values()) == label_of(ds[i]) ? 1.0 : 0.0;
    }
  }
  const double n = static_cast<double>(idx.size());
  s.loss /= n;
  s.metric /= n;
  return s;
}

bool all_finite(const Model& m) {
  for (const auto& [_, t] : m.params) {
    for (double v : t.values()) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

}  // namespace

std::vector<Tensor> task_parameters(const Model& m, Task task, const PhantomCase& probe) {
  for (const auto& [_, t] : m.params) {
    Tensor h = t;
    h.zero_grad();
  }
  const ModelOutput out = forward(m, input_of(probe));
  tc::backward(task_loss(out, task, probe));
  std::vector<Tensor> group;
  for (const auto& [name, t] : m.params) {
    Tensor h = t;
    if (h.has_grad()) group.push_back(h);
    h.zero_grad();
  }
  return group;
}

TrainResult train(const TrainConfig& cfg, const Dataset& ds, const Fold& fold) {
  cfg.check();
  const auto t0 = std::chrono::steady_clock::now();
  const auto train_idx = select_cases(ds, fold.train);
  const auto val_idx = select_cases(ds, fold.val);
  if (train_idx.empty()) throw ValidationError("empty training split");
  if (val_idx.empty()) throw ValidationError("empty validation split");
  {
    std::vector<std::string> cohort = fold.train;
    cohort.insert(cohort.end(), fold.val.begin(), fold.val.end());
    cohort.insert(cohort.end(), fold.test.begin(), fold.test.end());
    check_fold(fold, cohort);
  }

  std::vector<Tensor> inputs(ds.size());
  for (std::size_t i : train_idx) inputs[i] = input_of(ds[i]);
  for (std::size_t i : val_idx) inputs[i] = input_of(ds[i]);

  Model model = init_model(cfg.model, cfg.seed);
  std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 1);
  tc::SGD opt(task_parameters(model, cfg.task, ds[train_idx.front()]), cfg.lr, cfg.momentum);

  const bool lower_is_better = cfg.task == Task::Localization;
  TrainResult result;
  TrainReport& rep = result.report;
  std::vector<std::vector<double>> best_values;
  double best_metric = lower_is_better ? std::numeric_limits<double>::infinity() : -1.0;
  double best_loss = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;

  std::vector<std::size_t> order = train_idx;
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const double inv = 1.0 / static_cast<double>(end - start);
      for (std::size_t b = start; b < end; ++b) {
        const PhantomCase& c = ds[order[b]];
        const ModelOutput out = forward(model, inputs[order[b]], &rng);
        const Tensor loss = task_loss(out, cfg.task, c);
        const double lv = loss.item();
        if (!std::isfinite(lv)) {
          throw DivergenceError("non-finite loss at epoch " + std::to_string(epoch) + " on case " + c.case_id +
                                " (lr " + nlohmann::json(cfg.lr).dump() + ")");
        }
        epoch_loss += lv;
        tc::backward(tc::scale(loss, inv));
      }
      opt.step();
    }
    if (!all_finite(model)) throw DivergenceError("non-finite parameters after epoch " + std::to_string(epoch));
    const ValStats v = validate_model(model, cfg.task, ds, val_idx, inputs);
    if (!std::isfinite(v.loss)) throw DivergenceError("non-finite validation loss at epoch " + std::to_string(epoch));
    rep.train_loss.push_back(epoch_loss / static_cast<double>(order.size()));
    rep.val_loss.push_back(v.loss);
    rep.val_metric.push_back(v.metric);
    rep.epochs_run = epoch;

    const bool better = lower_is_better ? v.metric < best_metric : v.metric > best_metric;
    if (better || (v.metric == best_metric && v.loss < best_loss)) {
      best_metric = v.metric;
      best_loss = v.loss;
      rep.best_epoch = epoch;
      since_best = 0;
      best_values.clear();
      for (const auto& [_, t] : model.params) best_values.emplace_back(t.values().begin(), t.values().end());
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  rep.best_val_metric = best_metric;

  Checkpoint& ck = result.best;
  ck.model = frozen_copy(model);
  std::size_t p = 0;
  for (auto& [_, t] : ck.model.params) {
    auto dst = t.mutable_values();
    std::copy(best_values[p].begin(), best_values[p].end(), dst.begin());
    ++p;
  }
  ck.seed = cfg.seed;
  ck.epoch = rep.best_epoch;
  ck.val_metric = best_metric;
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

EvalResult evaluate(const Model& m, Task task, const Dataset& ds, const std::vector<std::string>& ids) {
  const auto idx = select_cases(ds, ids);
  if (idx.empty()) throw ValidationError("empty test split");
  const Model f = frozen_copy(m);
  EvalResult r;
  r.task = task;
  std::size_t correct = 0;
  for (std::size_t i : idx) {
    const PhantomCase& c = ds[i];
    const ModelOutput out = forward(f, input_of(c));
    r.case_ids.push_back(c.case_id);
    if (task == Task::Localization) {
      r.cases.push_back({c.case_id, c.landmarks, out.prediction(0)});
    } else {
      const std::size_t pred = argmax_row(out.cls_logits.values());
      r.predicted_labels.push_back(pred);
      correct += pred == label_of(c);
    }
  }
  if (task == Task::Localization) {
    r.metrics = compute_metrics(r.cases);
  } else {
    r.accuracy = static_cast<double>(correct) / static_cast<double>(idx.size());
  }
  return r;
}

nlohmann::json to_json(const EvalResult& r) {
  nlohmann::json j;
  j["task"] = r.task == Task::Localization ? "localization" : "classification";
  j["cases"] = r.case_ids;
  if (r.task == Task::Localization) {
    j["metrics"] = to_json(r.metrics);
  } else {
    j["accuracy"] = r.accuracy;
    j["predicted_labels"] = r.predicted_labels;
  }
  return j;
}

std::string eval_csv(const EvalResult& r) {
  std::ostringstream os;
  os << "case_id,landmark,z_true,z_pred,abs_err,top1,top2,within_tau1\n";
  for (const auto& c : r.cases) {
    const LandmarkSet pred = argmax_prediction(c.probs);
    for (std::size_t j = 0; j < c.truth.size(); ++j) {
      PredictionSet one(1, c.probs.depth);
      std::copy_n(c.probs.probs.begin() + static_cast<std::ptrdiff_t>(j * c.probs.depth), c.probs.depth,
                  one.probs.begin());
      const std::size_t err = pred[j] > c.truth[j] ? pred[j] - c.truth[j] : c.truth[j] - pred[j];
      os << c.case_id << ',' << j << ',' << c.truth[j] << ',' << pred[j] << ',' << err << ','
         << (top_k_accuracy(one, {c.truth[j]}, 1) > 0 ? 1 : 0) << ','
         << (top_k_accuracy(one, {c.truth[j]}, std::min<std::size_t>(2, c.probs.depth)) > 0 ? 1 : 0) << ','
         << (err <= 1 ? 1 : 0) << '\n';
    }
  }
  return os.str();
}

MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd m;
  if (xs.empty()) return m;
  for (double x : xs) m.mean += x;
  m.mean /= static_cast<double>(xs.size());
  for (double x : xs) m.std += (x - m.mean) * (x - m.mean);
  m.std = std::sqrt(m.std / static_cast<double>(xs.size()));
  return m;
}

CrossValidationResult cross_validate(const TrainConfig& cfg, const Dataset& ds, const FoldPlan& plan,
                                     std::size_t threads) {
  CrossValidationResult r;
  r.folds.resize(plan.folds.size());
  std::vector<std::exception_ptr> errors(plan.folds.size());
  auto run = [&](std::size_t f) {
    try {
      TrainConfig c = cfg;
      c.fold = f;
      c.k_folds = plan.folds.size();
      r.folds[f].train = train(c, ds, plan.folds[f]);
      r.folds[f].eval = evaluate(r.folds[f].train.best.model, cfg.task, ds, plan.folds[f].test);
    } catch (...) {
      errors[f] = std::current_exception();
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, plan.folds.size()));
  for (std::size_t start = 0; start < plan.folds.size(); start += threads) {
    std::vector<std::thread> pool;
    const std::size_t end = std::min(plan.folds.size(), start + threads);
    if (threads == 1) {
      run(start);
    } else {
      for (std::size_t f = start; f < end; ++f) pool.emplace_back(run, f);
      for (auto& t : pool) t.join();
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  auto collect = [&](auto get) {
    std::vector<double> xs;
    for (const auto& f : r.folds) xs.push_back(get(f.eval));
    return mean_std(xs);
  };
  if (cfg.task == Task::Localization) {
    r.summary = {{"mae", collect([](const EvalResult& e) { return e.metrics.aggregate.mae; })},
                 {"top1", collect([](const EvalResult& e) { return e.metrics.aggregate.top1; })},
                 {"top2", collect([](const EvalResult& e) { return e.metrics.aggregate.top2; })},
                 {"acc_tau1", collect([](const EvalResult& e) { return e.metrics.aggregate.acc_tau1; })},
                 {"kappa", collect([](const EvalResult& e) { return e.metrics.aggregate.kappa; })}};
  } else {
    r.summary = {{"accuracy", collect([](const EvalResult& e) { return e.accuracy; })}};
  }
  return r;
}

nlohmann::json to_json(const CrossValidationResult& r) {
  nlohmann::json j;
  nlohmann::json folds = nlohmann::json::array();
  for (std::size_t f = 0; f < r.folds.size(); ++f) {
    nlohmann::json e;
    e["fold"] = f;
    e["train"] = to_json(r.folds[f].train.report);
    e["eval"] = to_json(r.folds[f].eval);
    folds.push_back(e);
  }
  j["folds"] = folds;
  nlohmann::json agg;
  for (const auto& [name, ms] : r.summary) agg[name] = {{"mean", ms.mean}, {"std", ms.std}};
  j["aggregate"] = agg;
  return j;
}

InferenceResult infer(const Model& m, const Volume& v) {
  const auto problems = validate(v);
  if (!problems.empty()) throw ValidationError("invalid volume: " + problems.front());
  if (v.dims()[2] > m.config.d_max) {
    throw ValidationError("depth " + std::to_string(v.dims()[2]) + " exceeds d_max " + std::to_string(m.config.d_max));
  }
  const Model f = frozen_copy(m);
  const ModelOutput out = forward(f, volumes_to_input({&v}));
  InferenceResult r;
  r.probs = out.prediction(0);
  r.landmarks = argmax_prediction(r.probs);
  return r;
}

nlohmann::json to_json(const InferenceResult& r) {
  nlohmann::json j;
  j["landmarks"] = r.landmarks;
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t n = 0; n < r.probs.n; ++n) {
    rows.push_back(std::vector<double>(r.probs.probs.begin() + static_cast<std::ptrdiff_t>(n * r.probs.depth),
                                       r.probs.probs.begin() + static_cast<std::ptrdiff_t>((n + 1) * r.probs.depth)));
  }
  j["probabilities"] = rows;
  return j;
}

LabelMask assign_segments(const BinaryMask& calc, const LandmarkSet& landmarks, const HemisphereResult& hemis,
                          SegmentRule rule) {
  if (calc.dims != hemis.left.dims || calc.dims != hemis.right.dims) {
    throw ValidationError("assign_segments: mask dims differ");
  }
  if (landmarks.size() != kDefaultLandmarks) throw ValidationError("assign_segments needs six landmarks");
  const auto [H, W, D] = calc.dims;
  auto flip = [&](std::size_t z) { return rule.z_increases_superior ? z : D - 1 - z; };
  LandmarkSet c(landmarks.size());
  for (std::size_t j = 0; j < c.size(); ++j) {
    if (landmarks[j] >= D) throw ValidationError("landmark outside the volume");
    c[j] = flip(landmarks[j]);
  }
  check_landmarks(c, D);
  LabelMask out(calc.dims);
  for (std::size_t k = 0; k < D; ++k) {
    const std::size_t z = flip(k);
    for (std::size_t j = 0; j < W; ++j) {
      for (std::size_t i = 0; i < H; ++i) {
        const std::size_t n = calc.index(i, j, k);
        if (!calc.bits[n]) continue;
        const bool right = hemis.right.bits[n] != 0;
        if (right == (hemis.left.bits[n] != 0)) throw ValidationError("hemisphere masks do not partition the volume");
        const std::size_t* s = c.data() + (right ? kLandmarksPerSide : 0);
        std::uint8_t seg = 4;
        if (z <= s[0]) {
          seg = 1;
        } else if (z <= s[1]) {
          seg = 2;
        } else if (z <= s[2]) {
          seg = 3;
        }
        out.labels[n] = static_cast<std::uint8_t>(seg + (right ? 4 : 0));
      }
    }
  }
  return out;
}

AblationAxis parse_ablation_axis(const std::string& s) {
  if (s == "wo_attention") return AblationAxis::WithoutAttention;
  if (s == "right_padding") return AblationAxis::RightPadding;
  if (s == "layers") return AblationAxis::Layers;
  throw ValidationError("unknown ablation axis " + s + " (wo_attention, right_padding, layers)");
}

std::string to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::WithoutAttention:
      return "wo_attention";
    case AblationAxis::RightPadding:
      return "right_padding";
    case AblationAxis::Layers:
      return "layers";
  }
  return "?";
}

std::vector<AblationArm> ablation_arms(const TrainConfig& base, AblationAxis axis) {
  std::vector<AblationArm> arms{{"full", base}};
  if (axis == AblationAxis::WithoutAttention) {
    AblationArm a{"wo_attention", base};
    a.config.model.attention_enabled = false;
    arms.push_back(a);
  } else if (axis == AblationAxis::RightPadding) {
    AblationArm a{"right_padding", base};
    a.config.model.padding_side = PaddingSide::Right;
    arms.push_back(a);
  } else {
    arms.clear();
    for (std::size_t layers : {std::size_t{0}, std::size_t{1}, std::size_t{8}}) {
      AblationArm a{"layers_" + std::to_string(layers), base};
      a.config.model.n_layers = layers;
      arms.push_back(a);
    }
  }
  return arms;
}

std::vector<AblationRow> run_ablation(const TrainConfig& base, AblationAxis axis, const Dataset& ds,
                                      const std::vector<std::uint64_t>& seeds) {
  std::vector<std::string> ids;
  for (const auto& c : ds) ids.push_back(c.case_id);
  const FoldPlan plan = make_folds(ids, base.k_folds, base.fold_seed);
  std::vector<AblationRow> rows;
  for (std::uint64_t seed : seeds) {
    const std::size_t fold = static_cast<std::size_t>(seed % base.k_folds);
    for (const auto& arm : ablation_arms(base, axis)) {
      TrainConfig c = arm.config;
      c.seed = seed;
      c.fold = fold;
      const TrainResult tr = train(c, ds, plan.folds[fold]);
      const EvalResult ev = evaluate(tr.best.model, c.task, ds, plan.folds[fold].test);
      AblationRow row;
      row.seed = seed;
      row.arm = arm.name;
      row.fold = fold;
      row.mae = ev.metrics.aggregate.mae;
      row.acc_tau1 = ev.metrics.aggregate.acc_tau1;
      row.accuracy = ev.accuracy;
      row.report = tr.report;
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

nlohmann::json to_json(const std::vector<AblationRow>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) {
    arr.push_back({{"seed", r.seed},
                   {"arm", r.arm},
                   {"fold", r.fold},
                   {"mae", r.mae},
                   {"acc_tau1", r.acc_tau1},
                   {"accuracy", r.accuracy},
                   {"best_epoch", r.report.best_epoch},
                   {"epochs_run", r.report.epochs_run}});
  }
  return arr;
}

}  // namespace depthseq
