#include "depthseq/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "depthseq/errors.hpp"

namespace depthseq {

std::vector<double> one_hot_target(std::size_t z, std::size_t depth) {
  if (z >= depth) {
    throw ValidationError("target slice " + std::to_string(z) + " outside [0, " + std::to_string(depth) + ")");
  }
  std::vector<double> y(depth, 0.0);
  y[z] = 1.0;
  return y;
}

tc::Tensor loss_loc(const tc::Tensor& logits, const tc::AttentionMask& mask, std::size_t first_valid,
                    const std::vector<LandmarkSet>& truth) {
  if (logits.rank() != 3 || truth.size() != logits.dim(0)) {
    throw ValidationError("loss_loc expects one landmark set per batch element");
  }
  const std::size_t N = logits.dim(1);
  std::vector<std::size_t> targets;
  targets.reserve(truth.size() * N);
  for (const auto& t : truth) {
    if (t.size() != N) throw ValidationError("landmark count does not match the head");
    for (auto z : t) targets.push_back(first_valid + z);
  }
  return tc::cross_entropy(logits, targets, &mask);
}

tc::Tensor loss_loc(const ModelOutput& out, const std::vector<LandmarkSet>& truth) {
  for (const auto& t : truth) {
    for (auto z : t) {
      if (z >= out.depth) throw ValidationError("invalid target index " + std::to_string(z));
    }
  }
  return loss_loc(out.landmark_logits, out.slice_mask, out.first_valid, truth);
}

tc::Tensor loss_cls(const tc::Tensor& cls_logits, const std::vector<std::size_t>& labels) {
  if (cls_logits.rank() != 2 || labels.size() != cls_logits.dim(0)) {
    throw ValidationError("loss_cls expects one label per batch element");
  }
  for (auto l : labels) {
    if (l >= cls_logits.dim(1)) throw ValidationError("class label " + std::to_string(l) + " out of range");
  }
  return tc::cross_entropy(cls_logits, labels);
}

LandmarkSet argmax_prediction(const PredictionSet& p) {
  LandmarkSet out(p.n, 0);
  for (std::size_t j = 0; j < p.n; ++j) {
    std::size_t best = 0;
    for (std::size_t z = 1; z < p.depth; ++z) {
      if (p.at(j, z) > p.at(j, best)) best = z;
    }
    out[j] = best;
  }
  return out;
}

double mae(const LandmarkSet& pred, const LandmarkSet& truth) {
  if (pred.size() != truth.size() || pred.empty()) throw ValidationError("landmark length mismatch");
  double s = 0.0;
  for (std::size_t j = 0; j < pred.size(); ++j) {
    s += std::abs(static_cast<double>(pred[j]) - static_cast<double>(truth[j]));
  }
  return s / static_cast<double>(pred.size());
}

double top_k_accuracy(const PredictionSet& p, const LandmarkSet& truth, std::size_t k) {
  if (k < 1 || k > p.depth) throw ValidationError("k out of range");
  if (truth.size() != p.n) throw ValidationError("landmark length mismatch");
  std::vector<std::size_t> order(p.depth);
  std::size_t hits = 0;
  for (std::size_t j = 0; j < p.n; ++j) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p.at(j, a) > p.at(j, b); });
    hits += std::find(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), truth[j]) !=
            order.begin() + static_cast<std::ptrdiff_t>(k);
  }
  return static_cast<double>(hits) / static_cast<double>(p.n);
}

double tolerance_accuracy(const LandmarkSet& pred, const LandmarkSet& truth, std::size_t tau) {
  if (pred.size() != truth.size() || pred.empty()) throw ValidationError("landmark length mismatch");
  std::size_t ok = 0;
  for (std::size_t j = 0; j < pred.size(); ++j) {
    const std::size_t err = pred[j] > truth[j] ? pred[j] - truth[j] : truth[j] - pred[j];
    ok += err <= tau;
  }
  return static_cast<double>(ok) / static_cast<double>(pred.size());
}

std::size_t ConfusionMatrix::total() const { return std::accumulate(counts.begin(), counts.end(), std::size_t{0}); }

void ConfusionMatrix::add(std::size_t a, std::size_t b, std::size_t n) {
  if (a >= k || b >= k) throw ValidationError("rating outside confusion matrix");
  at(a, b) += n;
}

double quadratic_weighted_kappa(const ConfusionMatrix& cm) {
  if (cm.k < 2) throw ValidationError("kappa needs at least two categories");
  const std::size_t total = cm.total();
  if (total == 0) throw ValidationError("kappa of an empty confusion matrix");
  const std::size_t K = cm.k;
  const double n = static_cast<double>(total);
  std::vector<double> rows(K, 0.0), cols(K, 0.0);
  for (std::size_t i = 0; i < K; ++i) {
    for (std::size_t j = 0; j < K; ++j) {
      rows[i] += static_cast<double>(cm.at(i, j)) / n;
      cols[j] += static_cast<double>(cm.at(i, j)) / n;
    }
  }
  const double km1 = static_cast<double>(K - 1);
  double observed = 0.0, expected = 0.0;
  bool diagonal = true;
  for (std::size_t i = 0; i < K; ++i) {
    for (std::size_t j = 0; j < K; ++j) {
      const double d = static_cast<double>(i) - static_cast<double>(j);
      const double w = d * d / (km1 * km1);
      observed += w * static_cast<double>(cm.at(i, j)) / n;
      expected += w * rows[i] * cols[j];
      if (i != j && cm.at(i, j) != 0) diagonal = false;
    }
  }
  if (expected == 0.0) {
    if (diagonal) return 1.0;
    throw ValidationError("undefined kappa");
  }
  return 1.0 - observed / expected;
}

double slice_kappa(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  if (a.size() != b.size() || a.empty()) throw ValidationError("kappa rating length mismatch");
  const auto [amin, amax] = std::minmax_element(a.begin(), a.end());
  const auto [bmin, bmax] = std::minmax_element(b.begin(), b.end());
  const std::size_t lo = std::min(*amin, *bmin);
  const std::size_t hi = std::max(*amax, *bmax);
  if (hi == lo) return 1.0;  // a single observed category: every rating agrees
  ConfusionMatrix cm(hi - lo + 1);
  for (std::size_t i = 0; i < a.size(); ++i) cm.add(a[i] - lo, b[i] - lo);
  return quadratic_weighted_kappa(cm);
}

double dice(const BinaryMask& a, const BinaryMask& b) {
  if (a.dims != b.dims) throw ValidationError("dice: mask dims differ");
  std::size_t inter = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    const bool x = a.bits[i] != 0, y = b.bits[i] != 0;
    inter += x && y;
    na += x;
    nb += y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

std::array<double, 8> per_segment_volume(const LabelMask& lm, const Vec3& spacing) {
  std::array<std::size_t, 9> counts{};
  for (auto l : lm.labels) {
    if (l > 8) throw ValidationError("label outside 0..8");
    ++counts[l];
  }
  const double vv = spacing[0] * spacing[1] * spacing[2];
  std::array<double, 8> out{};
  for (std::size_t l = 1; l <= 8; ++l) out[l - 1] = static_cast<double>(counts[l]) * vv;
  return out;
}

MetricsReport compute_metrics(const std::vector<CasePrediction>& cases) {
  if (cases.empty()) throw ValidationError("no cases to evaluate");
  const std::size_t N = cases[0].truth.size();
  MetricsReport r;
  r.cases = cases.size();
  r.per_landmark.resize(N);
  std::vector<std::vector<std::size_t>> truth_by_lm(N), pred_by_lm(N);
  std::vector<std::size_t> pooled_truth, pooled_pred;
  LandmarkMetrics pooled;
  for (const auto& c : cases) {
    if (c.truth.size() != N || c.probs.n != N) throw ValidationError("case " + c.case_id + ": landmark count");
    const LandmarkSet pred = argmax_prediction(c.probs);
    const std::size_t k2 = std::min<std::size_t>(2, c.probs.depth);
    for (std::size_t j = 0; j < N; ++j) {
      PredictionSet one(1, c.probs.depth);
      std::copy_n(c.probs.probs.begin() + static_cast<std::ptrdiff_t>(j * c.probs.depth), c.probs.depth,
                  one.probs.begin());
      auto& m = r.per_landmark[j];
      const double e = mae({pred[j]}, {c.truth[j]});
      const double t1 = top_k_accuracy(one, {c.truth[j]}, 1);
      const double t2 = top_k_accuracy(one, {c.truth[j]}, k2);
      const double tol = tolerance_accuracy({pred[j]}, {c.truth[j]}, 1);
      m.mae += e;
      m.top1 += t1;
      m.top2 += t2;
      m.acc_tau1 += tol;
      pooled.mae += e;
      pooled.top1 += t1;
      pooled.top2 += t2;
      pooled.acc_tau1 += tol;
      truth_by_lm[j].push_back(c.truth[j]);
      pred_by_lm[j].push_back(pred[j]);
      pooled_truth.push_back(c.truth[j]);
      pooled_pred.push_back(pred[j]);
    }
  }
  const double n = static_cast<double>(cases.size());
  for (std::size_t j = 0; j < N; ++j) {
    auto& m = r.per_landmark[j];
    m.mae /= n;
    m.top1 /= n;
    m.top2 /= n;
    m.acc_tau1 /= n;
    m.kappa = slice_kappa(truth_by_lm[j], pred_by_lm[j]);
    r.mean_landmark_kappa += m.kappa / static_cast<double>(N);
  }
  // Pooled over every (case, landmark) pair; equals the mean of the per-landmark values.
  const double pairs = n * static_cast<double>(N);
  r.aggregate.mae = pooled.mae / pairs;
  r.aggregate.top1 = pooled.top1 / pairs;
  r.aggregate.top2 = pooled.top2 / pairs;
  r.aggregate.acc_tau1 = pooled.acc_tau1 / pairs;
  r.aggregate.kappa = slice_kappa(pooled_truth, pooled_pred);
  return r;
}

nlohmann::json to_json(const LandmarkMetrics& m) {
  nlohmann::json j;
  j["mae"] = m.mae;
  j["top1"] = m.top1;
  j["top2"] = m.top2;
  j["acc_tau1"] = m.acc_tau1;
  j["kappa"] = m.kappa;
  return j;
}

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["cases"] = r.cases;
  auto per = nlohmann::json::array();
  for (const auto& m : r.per_landmark) per.push_back(to_json(m));
  j["per_landmark"] = per;
  j["aggregate"] = to_json(r.aggregate);
  j["aggregate"]["kappa_per_landmark_mean"] = r.mean_landmark_kappa;
  return j;
}

}  // namespace depthseq
