#include "depthseq/gradcheck.hpp"

#include <algorithm>
#include <functional>
#include <random>

#include "depthseq/model.hpp"
#include "depthseq/objectives.hpp"
#include "depthseq/tensor.hpp"

namespace depthseq {

namespace {

using tc::Shape;
using tc::Tensor;

struct Case {
  std::function<Tensor()> f;
  std::vector<Tensor> params;
};

class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  std::size_t size(std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng_); }

  Tensor randn(Shape s, bool grad = true, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    std::vector<double> v(tc::numel(s));
    for (double& x : v) x = n(rng_);
    return Tensor::from(std::move(s), std::move(v), grad);
  }

  tc::AttentionMask mask(std::size_t b, std::size_t l) {
    tc::AttentionMask m(b, l, true);
    for (std::size_t i = 0; i < b; ++i) {
      const std::size_t valid = size(1, l);
      for (std::size_t p = 0; p + valid < l; ++p) m.set(i, p, false);
    }
    return m;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

// Scalar probe: sum(y * R) with a fixed random R, so every output entry matters.
Tensor project(const Tensor& y, const Tensor& r) { return tc::sum(tc::mul(y, r)); }

using Builder = std::function<Case(Gen&)>;

std::vector<std::pair<std::string, Builder>> op_builders() {
  std::vector<std::pair<std::string, Builder>> b;
  b.emplace_back("add", [](Gen& g) {
    Shape s{g.size(1, 4), g.size(1, 5)};
    auto a = g.randn(s), c = g.randn(s), r = g.randn(s, false);
    return Case{[=] { return project(tc::add(a, c), r); }, {a, c}};
  });
  b.emplace_back("add_broadcast", [](Gen& g) {
    Shape s{g.size(1, 4), g.size(1, 3), g.size(1, 5)};
    auto a = g.randn(s), c = g.randn({s[2]}), r = g.randn(s, false);
    return Case{[=] { return project(tc::add(a, c), r); }, {a, c}};
  });
  b.emplace_back("mul", [](Gen& g) {
    Shape s{g.size(1, 4), g.size(1, 5)};
    auto a = g.randn(s), c = g.randn(s), r = g.randn(s, false);
    return Case{[=] { return project(tc::mul(a, c), r); }, {a, c}};
  });
  b.emplace_back("mul_broadcast", [](Gen& g) {
    Shape s{g.size(1, 4), g.size(1, 3), g.size(1, 5)};
    auto a = g.randn(s), c = g.randn({s[2]}), r = g.randn(s, false);
    return Case{[=] { return project(tc::mul(a, c), r); }, {a, c}};
  });
  b.emplace_back("scale", [](Gen& g) {
    Shape s{g.size(1, 6)};
    auto a = g.randn(s), r = g.randn(s, false);
    const double k = g.randn({1}, false).item();
    return Case{[=] { return project(tc::scale(a, k), r); }, {a}};
  });
  b.emplace_back("sum", [](Gen& g) {
    auto a = g.randn({g.size(1, 5), g.size(1, 5)});
    return Case{[=] { return tc::scale(tc::sum(tc::mul(a, a)), 0.5); }, {a}};
  });
  b.emplace_back("gelu", [](Gen& g) {
    Shape s{g.size(1, 4), g.size(1, 6)};
    auto a = g.randn(s, true, 1.5), r = g.randn(s, false);
    return Case{[=] { return project(tc::gelu(a), r); }, {a}};
  });
  b.emplace_back("reshape", [](Gen& g) {
    const std::size_t m = g.size(1, 4), n = g.size(1, 4);
    auto a = g.randn({m, n}), r = g.randn({n, m}, false);
    return Case{[=] { return project(tc::gelu(tc::reshape(a, {n, m})), r); }, {a}};
  });
  b.emplace_back("permute", [](Gen& g) {
    Shape s{g.size(1, 3), g.size(1, 4), g.size(1, 5)};
    auto a = g.randn(s), r = g.randn({s[2], s[0], s[1]}, false);
    return Case{[=] { return project(tc::gelu(tc::permute(a, {2, 0, 1})), r); }, {a}};
  });
  b.emplace_back("slice", [](Gen& g) {
    Shape s{g.size(1, 3), g.size(2, 6), g.size(1, 3)};
    const std::size_t start = g.size(0, s[1] - 1);
    const std::size_t len = g.size(1, s[1] - start);
    auto a = g.randn(s), r = g.randn({s[0], len, s[2]}, false);
    return Case{[=] { return project(tc::gelu(tc::slice(a, 1, start, len)), r); }, {a}};
  });
  b.emplace_back("concat", [](Gen& g) {
    const std::size_t n = g.size(1, 3), m1 = g.size(1, 4), m2 = g.size(1, 4), k = g.size(1, 3);
    auto a = g.randn({n, m1, k}), c = g.randn({n, m2, k}), r = g.randn({n, m1 + m2, k}, false);
    return Case{[=] { return project(tc::gelu(tc::concat({a, c}, 1)), r); }, {a, c}};
  });
  b.emplace_back("expand_batch", [](Gen& g) {
    const std::size_t bsz = g.size(1, 4), n = g.size(1, 5);
    auto a = g.randn({1, n}), r = g.randn({bsz, n}, false);
    return Case{[=] { return project(tc::gelu(tc::expand_batch(a, bsz)), r); }, {a}};
  });
  b.emplace_back("mean_pool", [](Gen& g) {
    Shape s{g.size(1, 3), g.size(1, 3), g.size(1, 4), g.size(1, 4)};
    auto a = g.randn(s), r = g.randn({s[0], s[1]}, false);
    return Case{[=] { return project(tc::gelu(tc::mean_pool(a, {2, 3})), r); }, {a}};
  });
  b.emplace_back("matmul", [](Gen& g) {
    const std::size_t t = g.size(1, 3), m = g.size(1, 4), k = g.size(1, 4), n = g.size(1, 4);
    auto a = g.randn({t, m, k}), c = g.randn({t, k, n}), r = g.randn({t, m, n}, false);
    return Case{[=] { return project(tc::matmul(a, c), r); }, {a, c}};
  });
  b.emplace_back("matmul_transposed", [](Gen& g) {
    const std::size_t t = g.size(1, 3), m = g.size(1, 4), k = g.size(1, 4), n = g.size(1, 4);
    auto a = g.randn({t, m, k}), c = g.randn({t, n, k}), r = g.randn({t, m, n}, false);
    return Case{[=] { return project(tc::matmul(a, c, true), r); }, {a, c}};
  });
  b.emplace_back("linear", [](Gen& g) {
    const std::size_t rows = g.size(1, 5), in = g.size(1, 5), out = g.size(1, 5);
    auto x = g.randn({rows, in}), w = g.randn({out, in}), bias = g.randn({out}), r = g.randn({rows, out}, false);
    return Case{[=] { return project(tc::linear(x, w, bias), r); }, {x, w, bias}};
  });
  b.emplace_back("layer_norm", [](Gen& g) {
    Shape s{g.size(1, 3), g.size(3, 6), g.size(3, 6)};
    const std::size_t axis = g.size(1, 2);
    auto x = g.randn(s), gam = g.randn({s[axis]}), bet = g.randn({s[axis]}), r = g.randn(s, false);
    return Case{[=] { return project(tc::layer_norm(x, gam, bet, axis), r); }, {x, gam, bet}};
  });
  b.emplace_back("conv3d", [](Gen& g) {
    const std::size_t B = g.size(1, 2), ci = g.size(1, 3), co = g.size(1, 3);
    const std::size_t H = g.size(2, 6), W = g.size(2, 6), D = g.size(1, 4);
    const std::size_t kh = g.size(1, 3), kw = g.size(1, 3), kd = g.size(1, 3);
    const tc::Triple stride{g.size(1, 2), g.size(1, 2), g.size(1, 2)};
    const tc::Triple pad{g.size(0, 1), g.size(0, 1), g.size(0, 1)};
    Shape xs{B, ci, H, W, D}, ws{co, ci, kh, kw, kd};
    Shape os;
    try {
      os = tc::conv3d_output_shape(xs, ws, stride, pad);
    } catch (...) {
      ws = {co, ci, 1, 1, 1};
      os = tc::conv3d_output_shape(xs, ws, stride, pad);
    }
    auto x = g.randn(xs), w = g.randn(ws), bias = g.randn({co}), r = g.randn(os, false);
    return Case{[=] { return project(tc::conv3d(x, w, bias, stride, pad), r); }, {x, w, bias}};
  });
  b.emplace_back("conv3d_stack", [](Gen& g) {
    const std::size_t H = 4 * g.size(1, 2), W = 4 * g.size(1, 2), D = g.size(1, 4);
    const std::size_t c1 = g.size(1, 3), c2 = g.size(1, 3);
    auto x = g.randn({1, 1, H, W, D}), w1 = g.randn({c1, 1, 3, 3, 3}, true, 0.5), w2 = g.randn({c2, c1, 3, 3, 1}, true, 0.5);
    auto b1 = g.randn({c1}), b2 = g.randn({c2});
    auto r = g.randn({1, c2, H / 4, W / 4, D}, false);
    const tc::Triple s{2, 2, 1};
    return Case{[=] {
                  auto h = tc::gelu(tc::conv3d(x, w1, b1, s, {1, 1, 1}));
                  return project(tc::conv3d(h, w2, b2, s, {1, 1, 0}), r);
                },
                {x, w1, b1, w2, b2}};
  });
  b.emplace_back("conv1d_depthwise", [](Gen& g) {
    const std::size_t B = g.size(1, 3), C = g.size(1, 4), L = g.size(1, 8), k = 2 * g.size(0, 2) + 1;
    auto x = g.randn({B, C, L}), w = g.randn({C, k}), bias = g.randn({C}), r = g.randn({B, C, L}, false);
    return Case{[=] { return project(tc::conv1d_depthwise(x, w, bias), r); }, {x, w, bias}};
  });
  b.emplace_back("masked_softmax", [](Gen& g) {
    const std::size_t B = g.size(1, 3), rows = g.size(1, 3), L = g.size(1, 8);
    auto x = g.randn({B, rows, L}), r = g.randn({B, rows, L}, false);
    const auto m = g.mask(B, L);
    return Case{[=] { return project(tc::masked_softmax(x, m), r); }, {x}};
  });
  b.emplace_back("apply_mask", [](Gen& g) {
    const std::size_t B = g.size(1, 3), L = g.size(1, 6), C = g.size(1, 4);
    auto x = g.randn({B, L, C}), r = g.randn({B, L, C}, false);
    const auto m = g.mask(B, L);
    return Case{[=] { return project(tc::gelu(tc::apply_mask(x, m, 1)), r); }, {x}};
  });
  b.emplace_back("multihead_attention", [](Gen& g) {
    const std::size_t heads = g.size(1, 3), dh = g.size(1, 3), C = heads * dh;
    const std::size_t B = g.size(1, 2), L = g.size(1, 6);
    const double s = 1.0 / std::sqrt(static_cast<double>(C));
    tc::AttentionParams p{g.randn({C, C}, true, s), g.randn({C}, true, 0.1), g.randn({C, C}, true, s),
                          g.randn({C}, true, 0.1), g.randn({C, C}, true, s), g.randn({C}, true, 0.1),
                          g.randn({C, C}, true, s), g.randn({C}, true, 0.1)};
    auto x = g.randn({B, L, C}), r = g.randn({B, L, C}, false);
    const auto m = g.mask(B, L);
    return Case{[=] { return project(tc::multihead_attention(x, m, heads, p), r); },
                {x, p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo}};
  });
  b.emplace_back("cross_entropy", [](Gen& g) {
    const std::size_t rows = g.size(1, 5), K = g.size(2, 6);
    std::vector<std::size_t> t(rows);
    for (auto& v : t) v = g.size(0, K - 1);
    auto x = g.randn({rows, K});
    return Case{[=] { return tc::cross_entropy(x, t); }, {x}};
  });
  b.emplace_back("cross_entropy_masked", [](Gen& g) {
    const std::size_t B = g.size(1, 3), N = g.size(1, 3), L = g.size(2, 8);
    const auto m = g.mask(B, L);
    std::vector<std::size_t> t;
    for (std::size_t b = 0; b < B; ++b) {
      for (std::size_t n = 0; n < N; ++n) t.push_back(L - 1 - g.size(0, m.valid_count(b) - 1));
    }
    auto x = g.randn({B, N, L});
    return Case{[=] { return tc::cross_entropy(x, t, &m); }, {x}};
  });
  b.emplace_back("dropout", [](Gen& g) {
    Shape s{g.size(1, 4), g.size(1, 6)};
    auto a = g.randn(s), r = g.randn(s, false);
    const std::uint64_t seed = g.size(0, 1000);
    return Case{[=] {
                  std::mt19937_64 rng(seed);
                  return project(tc::dropout(a, 0.3, rng), r);
                },
                {a}};
  });
  b.emplace_back("composite_loss", [](Gen& g) {
    ModelConfig c;
    c.encoder_channels = {g.size(4, 6), g.size(4, 6)};
    c.n_heads = g.size(1, 2);
    c.d_model = c.n_heads * g.size(4, 6);
    c.n_layers = g.size(1, 2);
    c.conv_kernel_depth = 3;
    c.n_landmarks = kDefaultLandmarks;
    c.n_classes = 3;
    const std::size_t D = g.size(4, 8);
    c.d_max = D + g.size(0, 3);
    c.cls_position = g.size(0, 1) ? ClsPosition::AfterPads : ClsPosition::Front;
    c.padding_side = g.size(0, 3) == 0 ? PaddingSide::Right : PaddingSide::Left;
    const Model m = init_model(c, g.size(0, 1 << 20));
    const std::size_t H = 16, W = 16;
    auto x = g.randn({1, 1, H, W, D}, false, 1.0);
    LandmarkSet z(kDefaultLandmarks);
    for (std::size_t side = 0; side < 2; ++side) {
      std::vector<std::size_t> v{g.size(0, D - 1), g.size(0, D - 1), g.size(0, D - 1)};
      std::sort(v.begin(), v.end());
      std::copy(v.begin(), v.end(), z.begin() + static_cast<std::ptrdiff_t>(3 * side));
    }
    const std::size_t label = g.size(0, 2);
    return Case{[=] {
                  const ModelOutput out = forward(m, x);
                  return tc::add(loss_loc(out, {z}), loss_cls(out.cls_logits, {label}));
                },
                m.parameters()};
  });
  return b;
}

}  // namespace

std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed, std::size_t shapes, double eps) {
  std::vector<GradCheckEntry> out;
  Gen g(seed);
  for (const auto& [name, build] : op_builders()) {
    GradCheckEntry e;
    e.op = name;
    for (std::size_t s = 0; s < shapes; ++s) {
      Case c = build(g);
      e.max_rel_error = std::max(e.max_rel_error, tc::grad_check(c.f, c.params, eps, 64, seed + s));
      ++e.shapes;
    }
    out.push_back(e);
  }
  return out;
}

nlohmann::json to_json(const std::vector<GradCheckEntry>& entries) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : entries) arr.push_back({{"op", e.op}, {"shapes", e.shapes}, {"max_rel_error", e.max_rel_error}});
  return arr;
}

}  // namespace depthseq
