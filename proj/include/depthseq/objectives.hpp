#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "depthseq/landmarks.hpp"
#include "depthseq/model.hpp"
#include "depthseq/tensor.hpp"
#include "depthseq/volume.hpp"

namespace depthseq {

// Kronecker delta over D slices.
std::vector<double> one_hot_target(std::size_t z, std::size_t depth);

// Sum over landmarks of the cross-entropy between each depth distribution and
// its true slice. `truth[b]` holds the N slice indices of batch element b.
tc::Tensor loss_loc(const ModelOutput& out, const std::vector<LandmarkSet>& truth);
// Same loss on raw logits [B, N, L] where slice z sits at token first_valid + z.
tc::Tensor loss_loc(const tc::Tensor& logits, const tc::AttentionMask& mask, std::size_t first_valid,
                    const std::vector<LandmarkSet>& truth);

tc::Tensor loss_cls(const tc::Tensor& cls_logits, const std::vector<std::size_t>& labels);

// Per landmark, the most probable slice; ties go to the lowest index.
LandmarkSet argmax_prediction(const PredictionSet& p);

double mae(const LandmarkSet& pred, const LandmarkSet& truth);
// Fraction of landmarks whose true slice is among the k most probable (ties by lowest index).
double top_k_accuracy(const PredictionSet& p, const LandmarkSet& truth, std::size_t k);
double tolerance_accuracy(const LandmarkSet& pred, const LandmarkSet& truth, std::size_t tau = 1);

// Rows: rater A, columns: rater B.
struct ConfusionMatrix {
  std::size_t k = 0;
  std::vector<std::size_t> counts;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t k_) : k(k_), counts(k_ * k_, 0) {}

  std::size_t& at(std::size_t i, std::size_t j) { return counts[i * k + j]; }
  std::size_t at(std::size_t i, std::size_t j) const { return counts[i * k + j]; }
  std::size_t total() const;
  void add(std::size_t a, std::size_t b, std::size_t n = 1);
};

// Weights (i-j)^2/(K-1)^2. Throws on an empty matrix, K < 2, or when the
// expected disagreement is zero and the observed matrix is not diagonal.
double quadratic_weighted_kappa(const ConfusionMatrix& cm);

// Kappa of slice-index agreement with categories spanning [min, max] of the
// observed indices.
double slice_kappa(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b);

// 2|a & b| / (|a| + |b|); 1 when both are empty.
double dice(const BinaryMask& a, const BinaryMask& b);

// mm^3 per label 1..8.
std::array<double, 8> per_segment_volume(const LabelMask& lm, const Vec3& spacing);

struct LandmarkMetrics {
  double mae = 0.0;
  double top1 = 0.0;
  double top2 = 0.0;
  double acc_tau1 = 0.0;
  double kappa = 0.0;
};

struct MetricsReport {
  std::vector<LandmarkMetrics> per_landmark;
  LandmarkMetrics aggregate;  // kappa here is the pooled kappa over all landmarks
  double mean_landmark_kappa = 0.0;
  std::size_t cases = 0;
};

struct CasePrediction {
  std::string case_id;
  LandmarkSet truth;
  PredictionSet probs;
};

MetricsReport compute_metrics(const std::vector<CasePrediction>& cases);

nlohmann::json to_json(const LandmarkMetrics& m);
nlohmann::json to_json(const MetricsReport& r);

}  // namespace depthseq
