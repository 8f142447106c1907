#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "depthseq/errors.hpp"
#include "depthseq/objectives.hpp"
#include "support.hpp"

using namespace depthseq;
using tc::Tensor;

namespace {

// kappa = 1 - sum w O / sum w E on raw counts, E_ij = r_i c_j / n.
double kappa_direct(const std::vector<std::vector<double>>& O) {
  const std::size_t K = O.size();
  double n = 0.0;
  std::vector<double> r(K, 0.0), c(K, 0.0);
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j) {
      r[i] += O[i][j];
      c[j] += O[i][j];
      n += O[i][j];
    }
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < K; ++i)
    for (std::size_t j = 0; j < K; ++j) {
      const double w = double((i - j) * (i - j)) / double((K - 1) * (K - 1));
      num += w * O[i][j];
      den += w * r[i] * c[j] / n;
    }
  return 1.0 - num / den;
}

PredictionSet random_probs(std::size_t n, std::size_t depth, std::mt19937_64& rng) {
  PredictionSet p(n, depth);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::size_t z = 0; z < depth; ++z) s += (p.at(j, z) = u(rng));
    for (std::size_t z = 0; z < depth; ++z) p.at(j, z) /= s;
  }
  return p;
}

std::vector<std::size_t> ranked(const PredictionSet& p, std::size_t j) {
  std::vector<std::size_t> idx(p.depth);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return p.at(j, a) > p.at(j, b); });
  return idx;
}

}  // namespace

TEST_CASE("one_hot_target") {
  CHECK(one_hot_target(0, 3) == std::vector<double>{1, 0, 0});
  CHECK(one_hot_target(2, 3) == std::vector<double>{0, 0, 1});
  for (std::size_t z = 0; z < 7; ++z) {
    const auto y = one_hot_target(z, 7);
    CHECK(std::count(y.begin(), y.end(), 1.0) == 1);
    CHECK(std::count(y.begin(), y.end(), 0.0) == 6);
    CHECK(y[z] == 1.0);
  }
  CHECK_THROWS_AS(one_hot_target(3, 3), ValidationError);
}

TEST_CASE("loss_loc") {
  const std::size_t N = 6, L = 10;
  const tc::AttentionMask all(1, L, true);
  const LandmarkSet z{1, 3, 5, 0, 4, 9};
  CHECK(loss_loc(Tensor::zeros({1, N, L}), all, 0, {z}).item() == doctest::Approx(6 * std::log(10.0)).epsilon(1e-12));

  std::vector<double> conc(N * L, 0.0);
  for (std::size_t j = 0; j < N; ++j) conc[j * L + z[j]] = 40.0;
  CHECK(loss_loc(Tensor::from({1, N, L}, conc), all, 0, {z}).item() < 1e-6);

  // Left padding: slice z lives at token first_valid + z.
  tc::AttentionMask padded(1, L + 3, true);
  for (std::size_t l = 0; l < 3; ++l) padded.set(0, l, false);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd(0.0, 2.0);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> v(N * (L + 3));
    for (double& x : v) x = nd(rng);
    const Tensor logits = Tensor::from({1, N, L + 3}, v);
    double expect = 0.0;
    for (std::size_t j = 0; j < N; ++j) {
      double m = -INFINITY;
      for (std::size_t l = 3; l < L + 3; ++l) m = std::max(m, v[j * (L + 3) + l]);
      double s = 0.0;
      for (std::size_t l = 3; l < L + 3; ++l) s += std::exp(v[j * (L + 3) + l] - m);
      expect += -(v[j * (L + 3) + 3 + z[j]] - m - std::log(s));
    }
    CHECK(std::abs(loss_loc(logits, padded, 3, {z}).item() - expect) < 1e-9);
  }
  CHECK_THROWS_AS(loss_loc(Tensor::zeros({1, N, L}), all, 0, {LandmarkSet{1, 2, 3, 4, 5, 10}}), ValidationError);
}

TEST_CASE("loss_cls") {
  CHECK(loss_cls(Tensor::zeros({1, 3}), {1}).item() == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  CHECK(loss_cls(Tensor::from({1, 3}, {0, 0, 50}), {2}).item() < 1e-12);
  CHECK_THROWS_AS(loss_cls(Tensor::zeros({1, 3}), {3}), ValidationError);
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd(0.0, 1.5);
  for (int t = 0; t < 20; ++t) {
    std::vector<double> v(3);
    for (double& x : v) x = nd(rng);
    const std::size_t y = t % 3;
    const double lse = std::log(std::exp(v[0]) + std::exp(v[1]) + std::exp(v[2]));
    CHECK(std::abs(loss_cls(Tensor::from({1, 3}, v), {y}).item() - (lse - v[y])) < 1e-12);
  }
}

TEST_CASE("argmax_prediction") {
  PredictionSet p(2, 3);
  p.probs = {0.1, 0.7, 0.2, 0.5, 0.5, 0.0};
  CHECK(argmax_prediction(p) == LandmarkSet{1, 0});

  std::mt19937_64 rng(3);
  for (int t = 0; t < 100; ++t) {
    PredictionSet q = random_probs(6, 2 + t % 20, rng);
    if (t % 5 == 0) q.at(0, q.depth - 1) = q.at(0, 0);  // occasional tie
    const LandmarkSet got = argmax_prediction(q);
    for (std::size_t j = 0; j < 6; ++j) {
      std::size_t best = 0;
      for (std::size_t z = 1; z < q.depth; ++z)
        if (q.at(j, z) > q.at(j, best)) best = z;
      CHECK(got[j] == best);
    }
  }
}

TEST_CASE("mae and tolerance accuracy") {
  const LandmarkSet t{3, 5, 7, 2, 6, 9};
  CHECK(mae(t, t) == 0.0);
  CHECK(mae({4, 5, 7, 2, 6, 9}, t) == doctest::Approx(1.0 / 6.0));
  CHECK_THROWS_AS(mae({1, 2}, t), ValidationError);
  CHECK(tolerance_accuracy({4, 6, 8, 3, 7, 10}, t, 1) == 1.0);
  CHECK(tolerance_accuracy({5, 7, 9, 4, 8, 11}, t, 1) == 0.0);
  CHECK(tolerance_accuracy(t, t, 0) == 1.0);

  std::mt19937_64 rng(4);
  for (int i = 0; i < 100; ++i) {
    LandmarkSet a(6), b(6);
    for (std::size_t j = 0; j < 6; ++j) {
      a[j] = rng() % 24;
      b[j] = rng() % 24;
    }
    double sum = 0.0;
    std::size_t within = 0;
    for (std::size_t j = 0; j < 6; ++j) {
      const double d = std::abs(double(a[j]) - double(b[j]));
      sum += d;
      within += d <= 1.0;
    }
    CHECK(mae(a, b) == doctest::Approx(sum / 6.0).epsilon(1e-15));
    CHECK(tolerance_accuracy(a, b, 1) == doctest::Approx(within / 6.0).epsilon(1e-15));
    CHECK(tolerance_accuracy(a, b, 2) >= tolerance_accuracy(a, b, 1));
  }
}

TEST_CASE("top_k_accuracy") {
  PredictionSet p(1, 3);
  p.probs = {0.2, 0.5, 0.3};
  CHECK(top_k_accuracy(p, {1}, 1) == 1.0);
  CHECK(top_k_accuracy(p, {2}, 1) == 0.0);
  CHECK(top_k_accuracy(p, {2}, 2) == 1.0);
  CHECK_THROWS_AS(top_k_accuracy(p, {2}, 0), ValidationError);
  CHECK_THROWS_AS(top_k_accuracy(p, {2}, 4), ValidationError);

  std::mt19937_64 rng(5);
  for (int t = 0; t < 100; ++t) {
    const PredictionSet q = random_probs(6, 3 + t % 20, rng);
    LandmarkSet truth(6);
    for (auto& z : truth) z = rng() % q.depth;
    double prev = 0.0;
    for (std::size_t k = 1; k <= 3; ++k) {
      std::size_t hits = 0;
      for (std::size_t j = 0; j < 6; ++j) {
        const auto r = ranked(q, j);
        hits += std::find(r.begin(), r.begin() + k, truth[j]) != r.begin() + k;
      }
      const double acc = top_k_accuracy(q, truth, k);
      CHECK(acc == doctest::Approx(hits / 6.0).epsilon(1e-15));
      CHECK(acc >= prev);
      prev = acc;
    }
  }
}

TEST_CASE("mae is zero exactly when top-1 is perfect") {
  std::mt19937_64 rng(6);
  for (int t = 0; t < 50; ++t) {
    const PredictionSet q = random_probs(6, 10, rng);
    const LandmarkSet pred = argmax_prediction(q);
    LandmarkSet truth = pred;
    if (t % 2) truth[t % 6] = (truth[t % 6] + 1) % 10;
    const bool perfect = mae(pred, truth) == 0.0;
    CHECK(perfect == (top_k_accuracy(q, truth, 1) == 1.0));
    CHECK(perfect == (tolerance_accuracy(pred, truth, 0) == 1.0));
  }
}

TEST_CASE("quadratic weighted kappa") {
  ConfusionMatrix diag(4);
  for (std::size_t i = 0; i < 4; ++i) diag.at(i, i) = i + 1;
  CHECK(std::abs(quadratic_weighted_kappa(diag) - 1.0) < 1e-12);

  ConfusionMatrix m3(3);
  const std::size_t v[3][3] = {{2, 1, 0}, {0, 2, 1}, {0, 0, 2}};
  std::vector<std::vector<double>> o(3, std::vector<double>(3));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) o[i][j] = double(m3.at(i, j) = v[i][j]);
  CHECK(std::abs(quadratic_weighted_kappa(m3) - kappa_direct(o)) < 1e-12);

  // Rank-one counts make the observed table equal its expectation.
  ConfusionMatrix indep(3);
  const std::size_t a[3] = {1, 2, 3}, b[3] = {2, 1, 4};
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) indep.at(i, j) = a[i] * b[j];
  CHECK(std::abs(quadratic_weighted_kappa(indep)) < 1e-12);

  CHECK_THROWS_AS(quadratic_weighted_kappa(ConfusionMatrix(3)), ValidationError);
  CHECK_THROWS_AS(quadratic_weighted_kappa(ConfusionMatrix(1)), ValidationError);

  // All mass in one category: expected disagreement is zero.
  ConfusionMatrix single(3);
  single.at(1, 1) = 5;
  CHECK(quadratic_weighted_kappa(single) == 1.0);
  ConfusionMatrix row(3);
  row.at(1, 0) = 2;
  row.at(1, 2) = 3;
  CHECK(quadratic_weighted_kappa(row) < 1.0);
}

TEST_CASE("kappa matches the direct formula on 100 random matrices") {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 100; ++t) {
    const std::size_t K = 2 + t % 7;
    ConfusionMatrix cm(K);
    std::vector<std::vector<double>> o(K, std::vector<double>(K));
    for (std::size_t i = 0; i < K; ++i)
      for (std::size_t j = 0; j < K; ++j) o[i][j] = double(cm.at(i, j) = rng() % 12);
    cm.at(0, K - 1) += 1;  // keeps both marginals spread
    o[0][K - 1] += 1;
    cm.at(K - 1, 0) += 1;
    o[K - 1][0] += 1;
    const double k = quadratic_weighted_kappa(cm);
    CHECK(std::abs(k - kappa_direct(o)) < 1e-9);
    CHECK(k >= -1.0);
    CHECK(k <= 1.0);
    ConfusionMatrix scaled = cm;
    for (auto& c : scaled.counts) c *= 3;
    CHECK(std::abs(quadratic_weighted_kappa(scaled) - k) < 1e-12);
  }
}

TEST_CASE("slice_kappa") {
  CHECK(slice_kappa({3, 4, 5}, {3, 4, 5}) == doctest::Approx(1.0));
  CHECK(slice_kappa({7, 7}, {7, 7}) == 1.0);
  // Categories span [2, 6]; compare against the matrix built by hand.
  const std::vector<std::size_t> a{2, 3, 6, 4}, b{3, 3, 5, 2};
  std::vector<std::vector<double>> o(5, std::vector<double>(5, 0.0));
  for (std::size_t i = 0; i < a.size(); ++i) o[a[i] - 2][b[i] - 2] += 1;
  CHECK(std::abs(slice_kappa(a, b) - kappa_direct(o)) < 1e-12);
}

TEST_CASE("dice") {
  BinaryMask a({4, 4, 2}), b({4, 4, 2});
  CHECK(dice(a, b) == 1.0);
  a.set(1, 1, 1);
  CHECK(dice(a, a) == 1.0);
  b.set(2, 2, 0);
  CHECK(dice(a, b) == 0.0);
  CHECK_THROWS_AS(dice(a, BinaryMask({1, 1, 1})), ValidationError);

  std::mt19937_64 rng(8);
  for (int t = 0; t < 100; ++t) {
    const BinaryMask x = testing::random_mask({5, 6, 3}, 0.3, rng), y = testing::random_mask({5, 6, 3}, 0.4, rng);
    std::size_t both = 0, nx = 0, ny = 0;
    for (std::size_t v = 0; v < x.bits.size(); ++v) {
      both += x.bits[v] && y.bits[v];
      nx += x.bits[v];
      ny += y.bits[v];
    }
    const double expect = nx + ny == 0 ? 1.0 : 2.0 * both / double(nx + ny);
    CHECK(dice(x, y) == doctest::Approx(expect).epsilon(1e-15));
  }
}

TEST_CASE("per_segment_volume") {
  LabelMask lm({4, 4, 4});
  for (double v : per_segment_volume(lm, {0.5, 0.5, 1.0})) CHECK(v == 0.0);
  for (std::size_t i = 0; i < 10; ++i) lm.labels[i] = 3;
  const auto vol = per_segment_volume(lm, {0.5, 0.5, 1.0});
  CHECK(vol[2] == 2.5);

  std::mt19937_64 rng(9);
  for (int t = 0; t < 50; ++t) {
    LabelMask r({6, 5, 4});
    std::size_t support = 0;
    for (auto& l : r.labels) {
      l = rng() % 9;
      support += l != 0;
    }
    const auto v = per_segment_volume(r, {0.5, 0.5, 1.0});
    // 0.25 mm^3 voxels keep the sums exact in binary floating point.
    CHECK(std::accumulate(v.begin(), v.end(), 0.0) == support * 0.25);
  }
}

TEST_CASE("compute_metrics of a perfect predictor") {
  std::vector<CasePrediction> cases;
  for (std::size_t c = 0; c < 4; ++c) {
    CasePrediction cp;
    cp.case_id = "c" + std::to_string(c);
    cp.truth = {2 + c, 5 + c, 9, 1, 6, 10 + c};
    cp.probs = PredictionSet(6, 16);
    for (std::size_t j = 0; j < 6; ++j) cp.probs.at(j, cp.truth[j]) = 1.0;
    cases.push_back(cp);
  }
  const MetricsReport r = compute_metrics(cases);
  CHECK(r.cases == 4);
  CHECK(r.per_landmark.size() == 6);
  CHECK(r.aggregate.mae == 0.0);
  CHECK(r.aggregate.top1 == 1.0);
  CHECK(r.aggregate.top2 == 1.0);
  CHECK(r.aggregate.acc_tau1 == 1.0);
  CHECK(r.aggregate.kappa == doctest::Approx(1.0));
}
