#include "depthseq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "depthseq/errors.hpp"

namespace depthseq::tc {

namespace {

thread_local MemoryStats g_memory;

void track_alloc(std::size_t bytes) {
  g_memory.current_bytes += bytes;
  g_memory.peak_bytes = std::max(g_memory.peak_bytes, g_memory.current_bytes);
}

void track_free(std::size_t bytes) { g_memory.current_bytes -= std::min(bytes, g_memory.current_bytes); }

[[noreturn]] void shape_error(const std::string& op, const std::string& what) {
  throw ValidationError("shape mismatch in " + op + ": " + what);
}

bool any_requires_grad(std::initializer_list<const Tensor*> xs) {
  for (const Tensor* t : xs) {
    if (t->defined() && t->requires_grad()) return true;
  }
  return false;
}

// Builds an op result. The backward closure is attached only when some input
// needs a gradient; parents are stored in the order given (undefined inputs skipped).
Tensor make_result(Shape shape, std::vector<double> value, std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward_fn) {
  const bool rg = any_requires_grad(inputs);
  auto n = std::make_shared<Node>(std::move(shape), std::move(value), rg);
  if (rg) {
    for (const Tensor* t : inputs) {
      if (t->defined()) n->parents.push_back(t->shared());
    }
    n->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

// Grad buffer of a parent if it participates in the backward pass, else null.
double* grad_of(const std::shared_ptr<Node>& p) { return p->requires_grad ? p->grad.data() : nullptr; }

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// outer/inner extents around `axis`.
std::pair<std::size_t, std::size_t> split_at(const Shape& s, std::size_t axis) {
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, inner};
}

}  // namespace

std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

Node::Node(Shape s, std::vector<double> v, bool rg) : shape(std::move(s)), value(std::move(v)), requires_grad(rg) {
  if (value.size() != numel(shape)) {
    throw ValidationError("tensor value count " + std::to_string(value.size()) + " does not match shape " +
                          shape_str(shape));
  }
  track_alloc(value.size() * sizeof(double));
}

Node::~Node() { track_free((value.size() + grad.size()) * sizeof(double)); }

void Node::ensure_grad() {
  if (grad.size() == value.size()) return;
  grad.assign(value.size(), 0.0);
  track_alloc(grad.size() * sizeof(double));
}

void Node::clear_grad() {
  track_free(grad.size() * sizeof(double));
  grad.clear();
  grad.shrink_to_fit();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = numel(shape);
  return Tensor(std::make_shared<Node>(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(std::make_shared<Node>(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({}, {v}, requires_grad); }

double Tensor::item() const {
  if (size() != 1) throw ValidationError("item() on a tensor with " + std::to_string(size()) + " elements");
  return node_->value[0];
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

std::size_t AttentionMask::valid_count(std::size_t b) const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < length; ++l) n += at(b, l);
  return n;
}

MemoryStats memory_stats() { return g_memory; }
void reset_peak_memory() { g_memory.peak_bytes = g_memory.current_bytes; }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) throw ValidationError("backward requires a scalar loss");
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS: parents land before children in `order`.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node(), 0}};
  seen.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    if (n->backward_fn) {
      if (n->grad.size() == n->value.size()) {
        std::fill(n->grad.begin(), n->grad.end(), 0.0);
      }
    }
    n->ensure_grad();
  }
  loss.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

// ---------------------------------------------------------------------------
// elementwise and shape ops

Tensor add(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sb.size() > sa.size() || !std::equal(sb.rbegin(), sb.rend(), sa.rbegin())) {
    shape_error("add", shape_str(sa) + " + " + shape_str(sb));
  }
  const std::size_t n = a.size(), nb = b.size();
  std::vector<double> out(n);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i % nb];
  return make_result(sa, std::move(out), {&a, &b}, [n, nb](Node& self) {
    const double* g = self.grad.data();
    for (auto& p : self.parents) {
      double* gp = grad_of(p);
      if (!gp) continue;
      if (p->value.size() == n) {
        for (std::size_t i = 0; i < n; ++i) gp[i] += g[i];
      } else {
        for (std::size_t i = 0; i < n; ++i) gp[i % nb] += g[i];
      }
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sb.size() > sa.size() || !std::equal(sb.rbegin(), sb.rend(), sa.rbegin())) {
    shape_error("mul", shape_str(sa) + " * " + shape_str(sb));
  }
  const std::size_t n = a.size(), nb = b.size();
  std::vector<double> out(n);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i % nb];
  const bool a_rg = a.requires_grad();
  const bool b_rg = b.requires_grad();
  return make_result(sa, std::move(out), {&a, &b}, [n, nb, a_rg, b_rg](Node& self) {
    auto& pa = self.parents[0];
    auto& pb = self.parents.size() > 1 ? self.parents[1] : self.parents[0];
    const double* g = self.grad.data();
    if (a_rg) {
      for (std::size_t i = 0; i < n; ++i) pa->grad[i] += g[i] * pb->value[i % nb];
    }
    if (b_rg) {
      for (std::size_t i = 0; i < n; ++i) pb->grad[i % nb] += g[i] * pa->value[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v *= s;
  return make_result(a.shape(), std::move(out), {&a}, [s](Node& self) {
    double* gp = self.parents[0]->grad.data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gp[i] += s * self.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return make_result({}, {s}, {&a}, [](Node& self) {
    auto& p = self.parents[0];
    const double g = self.grad[0];
    for (double& gp : p->grad) gp += g;
  });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * kInvSqrt2));
  return make_result(x.shape(), std::move(out), {&x}, [](Node& self) {
    auto& p = self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double v = p->value[i];
      const double d = 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      p->grad[i] += self.grad[i] * d;
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) shape_error("reshape", shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<double> out(x.values().begin(), x.values().end());
  return make_result(std::move(shape), std::move(out), {&x}, [](Node& self) {
    auto& p = self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
  });
}

namespace {

// For each output linear index, the input linear index under `perm`.
std::vector<std::size_t> permute_map(const Shape& in, const std::vector<std::size_t>& perm) {
  const std::size_t r = in.size();
  const auto in_strides = strides_of(in);
  Shape out_shape(r);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in[perm[i]];
    src_stride[i] = in_strides[perm[i]];
  }
  const std::size_t n = numel(in);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < n; ++o) {
    map[o] = src;
    for (std::size_t a = r; a-- > 0;) {
      if (++idx[a] < out_shape[a]) {
        src += src_stride[a];
        break;
      }
      src -= src_stride[a] * (out_shape[a] - 1);
      idx[a] = 0;
    }
  }
  return map;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const Shape& in = x.shape();
  if (perm.size() != in.size()) shape_error("permute", "rank " + std::to_string(in.size()));
  std::vector<bool> used(perm.size(), false);
  for (auto p : perm) {
    if (p >= perm.size() || used[p]) shape_error("permute", "invalid permutation");
    used[p] = true;
  }
  Shape out_shape(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out_shape[i] = in[perm[i]];
  auto map = std::make_shared<std::vector<std::size_t>>(permute_map(in, perm));
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = xv[(*map)[o]];
  return make_result(std::move(out_shape), std::move(out), {&x}, [map](Node& self) {
    auto& p = self.parents[0];
    for (std::size_t o = 0; o < self.grad.size(); ++o) p->grad[(*map)[o]] += self.grad[o];
  });
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  const Shape& in = x.shape();
  if (axis >= in.size() || start + length > in[axis]) {
    shape_error("slice", shape_str(in) + " axis " + std::to_string(axis));
  }
  auto [outer, inner] = split_at(in, axis);
  const std::size_t n_axis = in[axis];
  Shape out_shape = in;
  out_shape[axis] = length;
  std::vector<double> out(outer * length * inner);
  const auto xv = x.values();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.data() + (o * n_axis + start) * inner, length * inner, out.data() + o * length * inner);
  }
  return make_result(std::move(out_shape), std::move(out), {&x},
                     [outer = outer, inner = inner, n_axis, start, length](Node& self) {
                       auto& p = self.parents[0];
                       for (std::size_t o = 0; o < outer; ++o) {
                         const double* g = self.grad.data() + o * length * inner;
                         double* gp = p->grad.data() + (o * n_axis + start) * inner;
                         for (std::size_t i = 0; i < length * inner; ++i) gp[i] += g[i];
                       }
                     });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) shape_error("concat", "no inputs");
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) shape_error("concat", "axis out of range");
  out_shape[axis] = 0;
  for (const auto& t : parts) {
    Shape s = t.shape();
    if (s.size() != out_shape.size()) shape_error("concat", "rank mismatch");
    out_shape[axis] += s[axis];
    s[axis] = 0;
    Shape ref = parts[0].shape();
    ref[axis] = 0;
    if (s != ref) shape_error("concat", shape_str(t.shape()) + " vs " + shape_str(parts[0].shape()));
  }
  auto [outer, inner] = split_at(out_shape, axis);
  const std::size_t total_axis = out_shape[axis];
  std::vector<double> out(numel(out_shape));
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& t : parts) {
    const std::size_t w = t.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(t.values().data() + o * w, w, out.data() + o * total_axis * inner + offset);
    }
    widths.push_back(w);
    offset += w;
  }
  // Parents list skips nothing here: every part is a defined tensor.
  bool rg = false;
  for (const auto& t : parts) rg = rg || t.requires_grad();
  auto node = std::make_shared<Node>(std::move(out_shape), std::move(out), rg);
  if (rg) {
    for (const auto& t : parts) node->parents.push_back(t.shared());
    node->backward_fn = [widths, outer = outer, row = total_axis * inner](Node& self) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        auto& p = self.parents[k];
        const std::size_t w = widths[k];
        if (p->requires_grad) {
          for (std::size_t o = 0; o < outer; ++o) {
            const double* g = self.grad.data() + o * row + off;
            double* gp = p->grad.data() + o * w;
            for (std::size_t i = 0; i < w; ++i) gp[i] += g[i];
          }
        }
        off += w;
      }
    };
  }
  return Tensor(std::move(node));
}

Tensor expand_batch(const Tensor& x, std::size_t batch) {
  if (x.rank() == 0 || x.dim(0) != 1) shape_error("expand_batch", shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape[0] = batch;
  const std::size_t n = x.size();
  std::vector<double> out(n * batch);
  for (std::size_t b = 0; b < batch; ++b) std::copy_n(x.values().data(), n, out.data() + b * n);
  return make_result(std::move(out_shape), std::move(out), {&x}, [n, batch](Node& self) {
    auto& p = self.parents[0];
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < n; ++i) p->grad[i] += self.grad[b * n + i];
    }
  });
}

Tensor mean_pool(const Tensor& x, std::vector<std::size_t> axes) {
  const Shape& in = x.shape();
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  std::vector<bool> reduced(in.size(), false);
  std::size_t count = 1;
  for (auto a : axes) {
    if (a >= in.size()) shape_error("mean_pool", "axis out of range");
    reduced[a] = true;
    count *= in[a];
  }
  Shape out_shape;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (!reduced[i]) out_shape.push_back(in[i]);
  }
  // Output stride contributed by each input axis (0 for reduced axes).
  std::vector<std::size_t> ostride(in.size(), 0);
  {
    std::size_t s = 1;
    for (std::size_t i = in.size(); i-- > 0;) {
      if (!reduced[i]) {
        ostride[i] = s;
        s *= in[i];
      }
    }
  }
  const std::size_t n = x.size();
  auto map = std::make_shared<std::vector<std::size_t>>(n);
  {
    std::vector<std::size_t> idx(in.size(), 0);
    std::size_t dst = 0;
    for (std::size_t i = 0; i < n; ++i) {
      (*map)[i] = dst;
      for (std::size_t a = in.size(); a-- > 0;) {
        if (++idx[a] < in[a]) {
          dst += ostride[a];
          break;
        }
        dst -= ostride[a] * (in[a] - 1);
        idx[a] = 0;
      }
    }
  }
  std::vector<double> out(numel(out_shape), 0.0);
  const auto xv = x.values();
  for (std::size_t i = 0; i < n; ++i) out[(*map)[i]] += xv[i];
  const double inv = 1.0 / static_cast<double>(count);
  for (double& v : out) v *= inv;
  return make_result(std::move(out_shape), std::move(out), {&x}, [map, inv](Node& self) {
    auto& p = self.parents[0];
    for (std::size_t i = 0; i < p->grad.size(); ++i) p->grad[i] += self.grad[(*map)[i]] * inv;
  });
}

// ---------------------------------------------------------------------------
// linear algebra

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sa.size() != sb.size() ||
      !std::equal(sa.begin(), sa.end() - 2, sb.begin())) {
    shape_error("matmul", shape_str(sa) + " x " + shape_str(sb));
  }
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa.back();
  const std::size_t kb = transpose_b ? sb.back() : sb[sb.size() - 2];
  const std::size_t n = transpose_b ? sb[sb.size() - 2] : sb.back();
  if (k != kb) shape_error("matmul", shape_str(sa) + " x " + shape_str(sb));
  const std::size_t batch = a.size() / (m * k);
  Shape out_shape(sa.begin(), sa.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(batch * m * n, 0.0);
  const double* A = a.values().data();
  const double* B = b.values().data();
  for (std::size_t t = 0; t < batch; ++t) {
    const double* At = A + t * m * k;
    const double* Bt = B + t * k * n;
    double* Ct = out.data() + t * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double av = At[i * k + p];
        if (transpose_b) {
          for (std::size_t j = 0; j < n; ++j) Ct[i * n + j] += av * Bt[j * k + p];
        } else {
          for (std::size_t j = 0; j < n; ++j) Ct[i * n + j] += av * Bt[p * n + j];
        }
      }
    }
  }
  const bool a_rg = a.requires_grad(), b_rg = b.requires_grad();
  return make_result(std::move(out_shape), std::move(out), {&a, &b},
                     [batch, m, k, n, transpose_b, a_rg, b_rg](Node& self) {
                       auto& pa = self.parents[0];
                       auto& pb = self.parents[1];
                       const double* G = self.grad.data();
                       for (std::size_t t = 0; t < batch; ++t) {
                         const double* Gt = G + t * m * n;
                         const double* At = pa->value.data() + t * m * k;
                         const double* Bt = pb->value.data() + t * k * n;
                         if (a_rg) {
                           double* GA = pa->grad.data() + t * m * k;
                           for (std::size_t i = 0; i < m; ++i) {
                             for (std::size_t p = 0; p < k; ++p) {
                               double s = 0.0;
                               if (transpose_b) {
                                 for (std::size_t j = 0; j < n; ++j) s += Gt[i * n + j] * Bt[j * k + p];
                               } else {
                                 for (std::size_t j = 0; j < n; ++j) s += Gt[i * n + j] * Bt[p * n + j];
                               }
                               GA[i * k + p] += s;
                             }
                           }
                         }
                         if (b_rg) {
                           double* GB = pb->grad.data() + t * k * n;
                           for (std::size_t i = 0; i < m; ++i) {
                             for (std::size_t p = 0; p < k; ++p) {
                               const double av = At[i * k + p];
                               if (transpose_b) {
                                 for (std::size_t j = 0; j < n; ++j) GB[j * k + p] += av * Gt[i * n + j];
                               } else {
                                 for (std::size_t j = 0; j < n; ++j) GB[p * n + j] += av * Gt[i * n + j];
                               }
                             }
                           }
                         }
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() < 1 || weight.rank() != 2 || x.shape().back() != weight.dim(1)) {
    shape_error("linear", shape_str(x.shape()) + " with weight " + shape_str(weight.shape()));
  }
  const std::size_t in = weight.dim(1);
  const std::size_t outf = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outf)) {
    shape_error("linear", "bias " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outf;
  std::vector<double> out(rows * outf);
  const double* X = x.values().data();
  const double* W = weight.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t o = 0; o < outf; ++o) {
      double s = bias.defined() ? bias.values()[o] : 0.0;
      const double* xr = X + r * in;
      const double* wr = W + o * in;
      for (std::size_t i = 0; i < in; ++i) s += xr[i] * wr[i];
      out[r * outf + o] = s;
    }
  }
  const bool has_bias = bias.defined();
  const bool x_rg = x.requires_grad(), w_rg = weight.requires_grad();
  const bool b_rg = has_bias && bias.requires_grad();
  return make_result(std::move(out_shape), std::move(out), {&x, &weight, &bias},
                     [rows, in, outf, has_bias, x_rg, w_rg, b_rg](Node& self) {
                       auto& px = self.parents[0];
                       auto& pw = self.parents[1];
                       const double* G = self.grad.data();
                       const double* Wv = pw->value.data();
                       const double* Xv = px->value.data();
                       if (x_rg) {
                         double* GX = px->grad.data();
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t o = 0; o < outf; ++o) {
                             const double g = G[r * outf + o];
                             if (g == 0.0) continue;
                             const double* wr = Wv + o * in;
                             double* gx = GX + r * in;
                             for (std::size_t i = 0; i < in; ++i) gx[i] += g * wr[i];
                           }
                         }
                       }
                       if (w_rg) {
                         double* GW = pw->grad.data();
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t o = 0; o < outf; ++o) {
                             const double g = G[r * outf + o];
                             if (g == 0.0) continue;
                             const double* xr = Xv + r * in;
                             double* gw = GW + o * in;
                             for (std::size_t i = 0; i < in; ++i) gw[i] += g * xr[i];
                           }
                         }
                       }
                       if (has_bias && b_rg) {
                         double* GB = self.parents[2]->grad.data();
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t o = 0; o < outf; ++o) GB[o] += G[r * outf + o];
                         }
                       }
                     });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::size_t axis, double eps) {
  const Shape& s = x.shape();
  if (axis >= s.size()) shape_error("layer_norm", "axis out of range");
  const std::size_t n = s[axis];
  if (gamma.defined() && gamma.size() != n) shape_error("layer_norm", "gamma " + shape_str(gamma.shape()));
  if (beta.defined() && beta.size() != n) shape_error("layer_norm", "beta " + shape_str(beta.shape()));
  auto [outer, inner] = split_at(s, axis);
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(outer * inner);
  std::vector<double> out(x.size());
  const double* X = x.values().data();
  const double* gv = gamma.defined() ? gamma.values().data() : nullptr;
  const double* bv = beta.defined() ? beta.values().data() : nullptr;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mean = 0.0;
      for (std::size_t c = 0; c < n; ++c) mean += X[base + c * inner];
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        const double d = X[base + c * inner] - mean;
        var += d * d;
      }
      var /= static_cast<double>(n);
      const double is = 1.0 / std::sqrt(var + eps);
      (*inv_std)[o * inner + in] = is;
      for (std::size_t c = 0; c < n; ++c) {
        const std::size_t idx = base + c * inner;
        const double h = (X[idx] - mean) * is;
        (*xhat)[idx] = h;
        out[idx] = h * (gv ? gv[c] : 1.0) + (bv ? bv[c] : 0.0);
      }
    }
  }
  const bool has_g = gamma.defined(), has_b = beta.defined();
  const bool x_rg = x.requires_grad();
  const bool g_rg = has_g && gamma.requires_grad();
  const bool b_rg = has_b && beta.requires_grad();
  return make_result(s, std::move(out), {&x, &gamma, &beta},
                     [xhat, inv_std, outer = outer, inner = inner, n, has_g, has_b, x_rg, g_rg, b_rg](Node& self) {
                       auto& px = self.parents[0];
                       const double* G = self.grad.data();
                       const double* gv = has_g ? self.parents[1]->value.data() : nullptr;
                       double* GG = g_rg ? self.parents[1]->grad.data() : nullptr;
                       double* GB = b_rg ? self.parents[has_g ? 2 : 1]->grad.data() : nullptr;
                       std::vector<double> gh(n);
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t in = 0; in < inner; ++in) {
                           const std::size_t base = o * n * inner + in;
                           double mean_gh = 0.0, mean_ghx = 0.0;
                           for (std::size_t c = 0; c < n; ++c) {
                             const std::size_t idx = base + c * inner;
                             const double g = G[idx];
                             if (GG) GG[c] += g * (*xhat)[idx];
                             if (GB) GB[c] += g;
                             gh[c] = g * (gv ? gv[c] : 1.0);
                             mean_gh += gh[c];
                             mean_ghx += gh[c] * (*xhat)[idx];
                           }
                           if (!x_rg) continue;
                           mean_gh /= static_cast<double>(n);
                           mean_ghx /= static_cast<double>(n);
                           const double is = (*inv_std)[o * inner + in];
                           for (std::size_t c = 0; c < n; ++c) {
                             const std::size_t idx = base + c * inner;
                             px->grad[idx] += is * (gh[c] - mean_gh - (*xhat)[idx] * mean_ghx);
                           }
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// convolutions

Shape conv3d_output_shape(const Shape& x, const Shape& w, Triple stride, Triple padding) {
  if (x.size() != 5 || w.size() != 5 || x[1] != w[1]) {
    shape_error("conv3d", shape_str(x) + " with kernel " + shape_str(w));
  }
  if (stride.h == 0 || stride.w == 0 || stride.d == 0) shape_error("conv3d", "stride must be >= 1");
  auto out_len = [](std::size_t n, std::size_t k, std::size_t s, std::size_t p) -> std::size_t {
    if (n + 2 * p < k) shape_error("conv3d", "kernel larger than padded input");
    return (n + 2 * p - k) / s + 1;
  };
  return {x[0], w[0], out_len(x[2], w[2], stride.h, padding.h), out_len(x[3], w[3], stride.w, padding.w),
          out_len(x[4], w[4], stride.d, padding.d)};
}

namespace {

struct ConvGeom {
  std::size_t B, Ci, H, W, D, Co, KH, KW, KD, Ho, Wo, Do;
  Triple s, p;
};

// Visits every (output, input, weight) triple. fn(out_idx, in_idx, w_idx, count)
// is called once per contiguous run along depth.
template <typename Fn>
void conv3d_visit(const ConvGeom& g, Fn&& fn) {
  for (std::size_t b = 0; b < g.B; ++b) {
    for (std::size_t co = 0; co < g.Co; ++co) {
      for (std::size_t ci = 0; ci < g.Ci; ++ci) {
        for (std::size_t a = 0; a < g.KH; ++a) {
          for (std::size_t c = 0; c < g.KW; ++c) {
            for (std::size_t e = 0; e < g.KD; ++e) {
              const std::size_t widx = (((co * g.Ci + ci) * g.KH + a) * g.KW + c) * g.KD + e;
              // depth range with 0 <= do*sd + e - pd < D
              std::size_t d_lo = 0;
              while (d_lo < g.Do && d_lo * g.s.d + e < g.p.d) ++d_lo;
              std::size_t d_hi = d_lo;
              while (d_hi < g.Do && d_hi * g.s.d + e - g.p.d < g.D) ++d_hi;
              if (d_lo >= d_hi) continue;
              for (std::size_t ho = 0; ho < g.Ho; ++ho) {
                const std::ptrdiff_t hi = static_cast<std::ptrdiff_t>(ho * g.s.h + a) - static_cast<std::ptrdiff_t>(g.p.h);
                if (hi < 0 || hi >= static_cast<std::ptrdiff_t>(g.H)) continue;
                for (std::size_t wo = 0; wo < g.Wo; ++wo) {
                  const std::ptrdiff_t wi =
                      static_cast<std::ptrdiff_t>(wo * g.s.w + c) - static_cast<std::ptrdiff_t>(g.p.w);
                  if (wi < 0 || wi >= static_cast<std::ptrdiff_t>(g.W)) continue;
                  const std::size_t oidx = (((b * g.Co + co) * g.Ho + ho) * g.Wo + wo) * g.Do + d_lo;
                  const std::size_t iidx =
                      (((b * g.Ci + ci) * g.H + static_cast<std::size_t>(hi)) * g.W + static_cast<std::size_t>(wi)) * g.D +
                      (d_lo * g.s.d + e - g.p.d);
                  fn(oidx, iidx, widx, d_hi - d_lo);
                }
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias, Triple stride, Triple padding) {
  const Shape out_shape = conv3d_output_shape(x.shape(), w.shape(), stride, padding);
  if (bias.defined() && bias.size() != w.dim(0)) shape_error("conv3d", "bias " + shape_str(bias.shape()));
  const ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4), w.dim(0), w.dim(2), w.dim(3), w.dim(4),
                   out_shape[2], out_shape[3], out_shape[4], stride, padding};
  std::vector<double> out(numel(out_shape), 0.0);
  if (bias.defined()) {
    const std::size_t plane = g.Ho * g.Wo * g.Do;
    for (std::size_t b = 0; b < g.B; ++b) {
      for (std::size_t co = 0; co < g.Co; ++co) {
        std::fill_n(out.data() + (b * g.Co + co) * plane, plane, bias.values()[co]);
      }
    }
  }
  const double* X = x.values().data();
  const double* Wt = w.values().data();
  const std::size_t sd = stride.d;
  conv3d_visit(g, [&](std::size_t o, std::size_t i, std::size_t k, std::size_t n) {
    const double wv = Wt[k];
    double* op = out.data() + o;
    const double* ip = X + i;
    for (std::size_t t = 0; t < n; ++t) op[t] += wv * ip[t * sd];
  });
  const bool has_bias = bias.defined();
  const bool x_rg = x.requires_grad(), w_rg = w.requires_grad();
  const bool b_rg = has_bias && bias.requires_grad();
  return make_result(out_shape, std::move(out), {&x, &w, &bias}, [g, has_bias, x_rg, w_rg, b_rg](Node& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    const double* G = self.grad.data();
    const double* Xv = px->value.data();
    const double* Wv = pw->value.data();
    double* GX = x_rg ? px->grad.data() : nullptr;
    double* GW = w_rg ? pw->grad.data() : nullptr;
    const std::size_t sd = g.s.d;
    conv3d_visit(g, [&](std::size_t o, std::size_t i, std::size_t k, std::size_t n) {
      const double* gp = G + o;
      if (GX) {
        const double wv = Wv[k];
        double* gx = GX + i;
        for (std::size_t t = 0; t < n; ++t) gx[t * sd] += wv * gp[t];
      }
      if (GW) {
        const double* xp = Xv + i;
        double s = 0.0;
        for (std::size_t t = 0; t < n; ++t) s += gp[t] * xp[t * sd];
        GW[k] += s;
      }
    });
    if (has_bias && b_rg) {
      double* GB = self.parents[2]->grad.data();
      const std::size_t plane = g.Ho * g.Wo * g.Do;
      for (std::size_t b = 0; b < g.B; ++b) {
        for (std::size_t co = 0; co < g.Co; ++co) {
          const double* gp = G + (b * g.Co + co) * plane;
          double s = 0.0;
          for (std::size_t t = 0; t < plane; ++t) s += gp[t];
          GB[co] += s;
        }
      }
    }
  });
}

Tensor conv1d_depthwise(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() != 3 || w.rank() != 2 || w.dim(0) != x.dim(1)) {
    shape_error("conv1d_depthwise", shape_str(x.shape()) + " with kernel " + shape_str(w.shape()));
  }
  const std::size_t k = w.dim(1);
  if (k % 2 == 0) throw ValidationError("conv1d_depthwise requires an odd kernel size");
  if (bias.defined() && bias.size() != x.dim(1)) shape_error("conv1d_depthwise", "bias");
  const std::size_t B = x.dim(0), C = x.dim(1), L = x.dim(2);
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k / 2);
  std::vector<double> out(x.size());
  const double* X = x.values().data();
  const double* Wv = w.values().data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) {
      const double* xr = X + (b * C + c) * L;
      double* orow = out.data() + (b * C + c) * L;
      const double bv = bias.defined() ? bias.values()[c] : 0.0;
      for (std::size_t l = 0; l < L; ++l) {
        double s = bv;
        for (std::size_t t = 0; t < k; ++t) {
          const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(l) + static_cast<std::ptrdiff_t>(t) - half;
          if (src >= 0 && src < static_cast<std::ptrdiff_t>(L)) s += Wv[c * k + t] * xr[src];
        }
        orow[l] = s;
      }
    }
  }
  const bool has_bias = bias.defined();
  const bool x_rg = x.requires_grad(), w_rg = w.requires_grad();
  const bool b_rg = has_bias && bias.requires_grad();
  return make_result(x.shape(), std::move(out), {&x, &w, &bias},
                     [B, C, L, k, half, has_bias, x_rg, w_rg, b_rg](Node& self) {
                       auto& px = self.parents[0];
                       auto& pw = self.parents[1];
                       const double* G = self.grad.data();
                       for (std::size_t b = 0; b < B; ++b) {
                         for (std::size_t c = 0; c < C; ++c) {
                           const double* gr = G + (b * C + c) * L;
                           const double* xr = px->value.data() + (b * C + c) * L;
                           for (std::size_t l = 0; l < L; ++l) {
                             const double g = gr[l];
                             for (std::size_t t = 0; t < k; ++t) {
                               const std::ptrdiff_t src =
                                   static_cast<std::ptrdiff_t>(l) + static_cast<std::ptrdiff_t>(t) - half;
                               if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
                               if (x_rg) px->grad[(b * C + c) * L + src] += g * pw->value[c * k + t];
                               if (w_rg) pw->grad[c * k + t] += g * xr[src];
                             }
                             if (has_bias && b_rg) self.parents[2]->grad[c] += g;
                           }
                         }
                       }
                     });
}

// ---------------------------------------------------------------------------
// masking, attention, losses

namespace {

void check_mask_layout(const char* op, const Shape& s, const AttentionMask& mask) {
  if (s.empty() || s.back() != mask.length || s[0] != mask.batch) {
    shape_error(op, shape_str(s) + " with mask [" + std::to_string(mask.batch) + "," +
                        std::to_string(mask.length) + "]");
  }
}

}  // namespace

Tensor masked_softmax(const Tensor& x, const AttentionMask& mask) {
  check_mask_layout("masked_softmax", x.shape(), mask);
  const std::size_t L = mask.length;
  const std::size_t rows = x.size() / L;
  const std::size_t per_batch = rows / mask.batch;
  std::vector<double> out(x.size(), 0.0);
  const double* X = x.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t b = r / per_batch;
    const double* xr = X + r * L;
    double* orow = out.data() + r * L;
    double mx = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t l = 0; l < L; ++l) {
      if (mask.at(b, l)) {
        mx = std::max(mx, xr[l]);
        any = true;
      }
    }
    if (!any) throw ValidationError("masked_softmax: all-invalid row");
    double z = 0.0;
    for (std::size_t l = 0; l < L; ++l) {
      if (mask.at(b, l)) {
        orow[l] = std::exp(xr[l] - mx);
        z += orow[l];
      }
    }
    for (std::size_t l = 0; l < L; ++l) orow[l] /= z;
  }
  auto probs = std::make_shared<std::vector<double>>(out);
  return make_result(x.shape(), std::move(out), {&x}, [probs, rows, L](Node& self) {
    auto& p = self.parents[0];
    for (std::size_t r = 0; r < rows; ++r) {
      const double* pr = probs->data() + r * L;
      const double* g = self.grad.data() + r * L;
      double dotpg = 0.0;
      for (std::size_t l = 0; l < L; ++l) dotpg += pr[l] * g[l];
      double* gp = p->grad.data() + r * L;
      for (std::size_t l = 0; l < L; ++l) gp[l] += pr[l] * (g[l] - dotpg);
    }
  });
}

Tensor apply_mask(const Tensor& x, const AttentionMask& mask, std::size_t seq_axis) {
  const Shape& s = x.shape();
  if (s.empty() || seq_axis == 0 || seq_axis >= s.size() || s[0] != mask.batch || s[seq_axis] != mask.length) {
    shape_error("apply_mask", shape_str(s));
  }
  auto [outer, inner] = split_at(s, seq_axis);
  const std::size_t L = mask.length;
  const std::size_t outer_per_batch = outer / mask.batch;
  auto keep = std::make_shared<std::vector<std::uint8_t>>(x.size());
  std::vector<double> out(x.size());
  const double* X = x.values().data();
  for (std::size_t o = 0; o < outer; ++o) {
    const std::size_t b = o / outer_per_batch;
    for (std::size_t l = 0; l < L; ++l) {
      const std::uint8_t k = mask.at(b, l) ? 1 : 0;
      const std::size_t base = (o * L + l) * inner;
      for (std::size_t i = 0; i < inner; ++i) {
        (*keep)[base + i] = k;
        out[base + i] = k ? X[base + i] : 0.0;
      }
    }
  }
  return make_result(s, std::move(out), {&x}, [keep](Node& self) {
    auto& p = self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if ((*keep)[i]) p->grad[i] += self.grad[i];
    }
  });
}

Tensor multihead_attention(const Tensor& x, const AttentionMask& mask, std::size_t heads, const AttentionParams& p) {
  if (x.rank() != 3) shape_error("multihead_attention", shape_str(x.shape()));
  const std::size_t B = x.dim(0), L = x.dim(1), C = x.dim(2);
  if (heads == 0 || C % heads != 0) {
    throw ValidationError("multihead_attention: channels " + std::to_string(C) + " not divisible by heads " +
                          std::to_string(heads));
  }
  if (mask.batch != B || mask.length != L) shape_error("multihead_attention", "mask shape");
  const std::size_t dh = C / heads;
  auto split_heads = [&](const Tensor& t) { return permute(reshape(t, {B, L, heads, dh}), {0, 2, 1, 3}); };
  const Tensor q = split_heads(linear(x, p.wq, p.bq));
  const Tensor k = split_heads(linear(x, p.wk, p.bk));
  const Tensor v = split_heads(linear(x, p.wv, p.bv));
  const Tensor scores = scale(matmul(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh)));
  const Tensor attn = masked_softmax(scores, mask);
  const Tensor ctx = reshape(permute(matmul(attn, v), {0, 2, 1, 3}), {B, L, C});
  return apply_mask(linear(ctx, p.wo, p.bo), mask, 1);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets, const AttentionMask* mask) {
  if (logits.rank() == 0) shape_error("cross_entropy", "scalar logits");
  const std::size_t K = logits.shape().back();
  const std::size_t rows = logits.size() / K;
  if (targets.size() != rows) {
    shape_error("cross_entropy", std::to_string(targets.size()) + " targets for " + std::to_string(rows) + " rows");
  }
  std::size_t per_batch = rows;
  if (mask) {
    check_mask_layout("cross_entropy", logits.shape(), *mask);
    per_batch = rows / mask->batch;
  }
  auto valid = [&](std::size_t r, std::size_t l) { return !mask || mask->at(r / per_batch, l); };
  auto probs = std::make_shared<std::vector<double>>(logits.size(), 0.0);
  const double* X = logits.values().data();
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t t = targets[r];
    if (t >= K) throw ValidationError("cross_entropy: target " + std::to_string(t) + " out of range");
    if (!valid(r, t)) throw ValidationError("cross_entropy: target at masked position");
    const double* xr = X + r * K;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t l = 0; l < K; ++l) {
      if (valid(r, l)) mx = std::max(mx, xr[l]);
    }
    double z = 0.0;
    for (std::size_t l = 0; l < K; ++l) {
      if (valid(r, l)) z += std::exp(xr[l] - mx);
    }
    const double lse = mx + std::log(z);
    loss += lse - xr[t];
    for (std::size_t l = 0; l < K; ++l) {
      if (valid(r, l)) (*probs)[r * K + l] = std::exp(xr[l] - lse);
    }
  }
  return make_result({}, {loss}, {&logits}, [probs, targets, K](Node& self) {
    auto& p = self.parents[0];
    const double g = self.grad[0];
    for (std::size_t i = 0; i < probs->size(); ++i) p->grad[i] += g * (*probs)[i];
    for (std::size_t r = 0; r < targets.size(); ++r) p->grad[r * K + targets[r]] -= g;
  });
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ValidationError("dropout probability must be < 1");
  std::bernoulli_distribution keep_dist(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  auto factor = std::make_shared<std::vector<double>>(x.size());
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    (*factor)[i] = keep_dist(rng) ? s : 0.0;
    out[i] = x.values()[i] * (*factor)[i];
  }
  return make_result(x.shape(), std::move(out), {&x}, [factor](Node& self) {
    auto& par = self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) par->grad[i] += self.grad[i] * (*factor)[i];
  });
}

// ---------------------------------------------------------------------------
// optimisation

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double eps,
                  std::size_t max_coords, std::uint64_t seed, Stencil stencil) {
  std::vector<Tensor> ps = params;
  for (auto& p : ps) p.zero_grad();
  const Tensor loss = f();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& p : ps) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.size(), 0.0);
    }
    p.zero_grad();
  }
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (std::size_t pi = 0; pi < ps.size(); ++pi) {
    auto vals = ps[pi].mutable_values();
    std::vector<std::size_t> coords(vals.size());
    std::iota(coords.begin(), coords.end(), 0);
    if (coords.size() > max_coords) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(max_coords);
    }
    for (std::size_t c : coords) {
      const double orig = vals[c];
      auto at = [&](double h) {
        vals[c] = orig + h;
        const double v = f().item();
        vals[c] = orig;
        return v;
      };
      double numeric = 0.0;
      if (stencil == Stencil::ThreePoint) {
        numeric = (at(eps) - at(-eps)) / (2.0 * eps);
      } else {
        numeric = (8.0 * (at(eps) - at(-eps)) - (at(2.0 * eps) - at(-2.0 * eps))) / (12.0 * eps);
      }
      const double a = analytic[pi][c];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

SGD::SGD(std::vector<Tensor> params, double lr, double momentum)
    : params_(std::move(params)), lr_(lr), momentum_(momentum) {
  for (const auto& p : params_) velocity_.emplace_back(p.size(), 0.0);
}

void SGD::step() {
  for (const auto& p : params_) {
    if (!p.has_grad()) throw ValidationError("missing gradient");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& v = velocity_[i];
    auto vals = params_[i].mutable_values();
    const auto g = params_[i].grad();
    for (std::size_t j = 0; j < v.size(); ++j) {
      v[j] = momentum_ * v[j] + g[j];
      vals[j] -= lr_ * v[j];
    }
  }
  zero_grad();
}

void SGD::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace depthseq::tc
