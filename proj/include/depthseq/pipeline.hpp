#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "depthseq/hemisplit.hpp"
#include "depthseq/model.hpp"
#include "depthseq/objectives.hpp"
#include "depthseq/phantom.hpp"

namespace depthseq {

enum class Task { Localization, Classification };

struct TrainConfig {
  ModelConfig model;
  Task task = Task::Localization;
  double lr = 2e-3;
  double momentum = 0.9;
  std::size_t batch_size = 4;
  std::size_t max_epochs = 60;
  std::size_t patience = 10;
  std::uint64_t seed = 0;
  std::size_t k_folds = 5;
  std::size_t fold = 0;
  std::uint64_t fold_seed = 0;
  std::filesystem::path manifest;

  void check() const;
};

// Accepts padding_side / attention_enabled at the top level as well as inside "model".
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TrainConfig& c);

struct TrainReport {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  std::vector<double> val_metric;  // MAE (localization) or accuracy (classification)
  std::size_t best_epoch = 0;      // 1-based
  double best_val_metric = 0.0;
  std::size_t epochs_run = 0;
  std::string checkpoint_path;
  double wall_seconds = 0.0;  // not serialized, so reports stay byte-identical across runs
};

nlohmann::json to_json(const TrainReport& r);

struct TrainResult {
  TrainReport report;
  Checkpoint best;
};

using Dataset = std::vector<PhantomCase>;

// Reads every case listed in the manifest (volumes, masks, labels).
Dataset load_dataset(const Manifest& m);

// Rows of `ds` whose ids are listed, in list order. Throws on unknown ids.
std::vector<std::size_t> select_cases(const Dataset& ds, const std::vector<std::string>& ids);

// The parameters that receive a gradient from the task loss (the other head is left out).
std::vector<tc::Tensor> task_parameters(const Model& m, Task task, const PhantomCase& probe);

// Copy whose parameters do not record graphs.
Model frozen_copy(const Model& m);

// SGD with early stopping on the validation split of `fold`. Throws
// DivergenceError when the loss becomes non-finite.
TrainResult train(const TrainConfig& cfg, const Dataset& ds, const Fold& fold);

struct EvalResult {
  Task task = Task::Localization;
  MetricsReport metrics;                  // localization
  std::vector<CasePrediction> cases;      // localization, in evaluation order
  double accuracy = 0.0;                  // classification
  std::vector<std::size_t> predicted_labels;
  std::vector<std::string> case_ids;
};

EvalResult evaluate(const Model& m, Task task, const Dataset& ds, const std::vector<std::string>& ids);
nlohmann::json to_json(const EvalResult& r);
// case_id,landmark,z_true,z_pred,abs_err,top1,top2,within_tau1
std::string eval_csv(const EvalResult& r);

struct FoldOutcome {
  TrainResult train;
  EvalResult eval;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation across folds
};

struct CrossValidationResult {
  std::vector<FoldOutcome> folds;
  // Aggregate metrics across folds: mae, top1, top2, acc_tau1, kappa (or accuracy).
  std::vector<std::pair<std::string, MeanStd>> summary;
};

// Runs every fold of `plan`; folds may train on up to `threads` threads, results
// are ordered by fold index regardless.
CrossValidationResult cross_validate(const TrainConfig& cfg, const Dataset& ds, const FoldPlan& plan,
                                     std::size_t threads = 1);
nlohmann::json to_json(const CrossValidationResult& r);
MeanStd mean_std(const std::vector<double>& xs);

struct InferenceResult {
  LandmarkSet landmarks;
  PredictionSet probs;
};

InferenceResult infer(const Model& m, const Volume& v);
nlohmann::json to_json(const InferenceResult& r);

struct SegmentRule {
  // false: lower slice index is more superior; the rule is applied on flipped indices.
  bool z_increases_superior = true;
};

// Labels each calcified voxel by side and by its slice relative to that side's
// landmarks: z <= c1 cervical, <= c2 petrous, <= c3 cavernous, else supraclinoid;
// right side adds 4.
LabelMask assign_segments(const BinaryMask& calc, const LandmarkSet& landmarks, const HemisphereResult& hemis,
                          SegmentRule rule = {});

enum class AblationAxis { WithoutAttention, RightPadding, Layers };
AblationAxis parse_ablation_axis(const std::string& s);
std::string to_string(AblationAxis a);

struct AblationArm {
  std::string name;
  TrainConfig config;
};

// Arms compared along an axis; the first is the baseline.
std::vector<AblationArm> ablation_arms(const TrainConfig& base, AblationAxis axis);

struct AblationRow {
  std::uint64_t seed = 0;
  std::string arm;
  std::size_t fold = 0;
  double mae = 0.0;       // localization
  double acc_tau1 = 0.0;  // localization
  double accuracy = 0.0;  // classification
  TrainReport report;
};

// For each seed, every arm trains on the same split (fold = seed mod k) with the same seed.
std::vector<AblationRow> run_ablation(const TrainConfig& base, AblationAxis axis, const Dataset& ds,
                                      const std::vector<std::uint64_t>& seeds);
nlohmann::json to_json(const std::vector<AblationRow>& rows);

}  // namespace depthseq
