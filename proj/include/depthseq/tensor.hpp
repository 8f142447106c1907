#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// Values and gradients are stored in double precision, so every reduction
// accumulates in 64 bits. A Tensor is a cheap handle to a shared graph node;
// ops return fresh nodes that remember their parents only when at least one
// parent requires a gradient.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace depthseq::tc {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a backward pass reaches the node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward_fn;

  Node(Shape s, std::vector<double> v, bool rg);
  ~Node();
  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  void ensure_grad();
  void clear_grad();
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() { node_->clear_grad(); }
  bool requires_grad() const { return node_->requires_grad; }
  double item() const;

  // New leaf holding a copy of the values, detached from any graph.
  Tensor detach() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Validity of each sequence position, per batch element. Row-major [batch][length].
struct AttentionMask {
  std::size_t batch = 0;
  std::size_t length = 0;
  std::vector<std::uint8_t> valid;

  AttentionMask() = default;
  AttentionMask(std::size_t b, std::size_t l, bool v = true)
      : batch(b), length(l), valid(b * l, v ? 1 : 0) {}

  bool at(std::size_t b, std::size_t l) const { return valid[b * length + l] != 0; }
  void set(std::size_t b, std::size_t l, bool v) { valid[b * length + l] = v ? 1 : 0; }
  std::size_t valid_count(std::size_t b) const;
};

// Sentinel score given to masked keys before the softmax.
inline constexpr double kMaskedScore = -1e30;

// Runs the reverse sweep from a scalar. Every requires_grad node reachable from
// `loss` gets a gradient buffer (zero if nothing flows into it); leaves
// accumulate across calls until cleared.
void backward(const Tensor& loss);

// ---- elementwise and shape ops ----

// b must have a's shape or a suffix of it (broadcast over leading axes).
Tensor add(const Tensor& a, const Tensor& b);
// Same broadcasting as add.
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor sum(const Tensor& a);
Tensor gelu(const Tensor& x);
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
// [1, ...] -> [batch, ...]
Tensor expand_batch(const Tensor& x, std::size_t batch);
// Mean over the listed axes; reduced axes are removed from the shape.
Tensor mean_pool(const Tensor& x, std::vector<std::size_t> axes);

// ---- linear algebra ----

// [..., M, K] x [..., K, N] (or [..., N, K] when transpose_b) with equal leading dims.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);
// Over the last axis: x[..., in] W[out, in] + b[out]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// Normalises along `axis` (population variance), then applies gamma/beta of
// length shape[axis]. gamma/beta may be undefined for the bare normalisation.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, std::size_t axis,
                  double eps = 1e-5);

// ---- convolutions ----

struct Triple {
  std::size_t h = 1, w = 1, d = 1;
};

// Cross-correlation. x [B, Cin, H, W, D], w [Cout, Cin, kh, kw, kd], bias [Cout] or undefined.
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias, Triple stride, Triple padding);
Shape conv3d_output_shape(const Shape& x, const Shape& w, Triple stride, Triple padding);

// Per-channel 1-D cross-correlation with same-length zero padding.
// x [B, C, L], w [C, k] with odd k, bias [C] or undefined.
Tensor conv1d_depthwise(const Tensor& x, const Tensor& w, const Tensor& bias);

// ---- masking, attention, losses ----

// Softmax along the last axis of x [B, ..., L] with invalid positions forced to
// probability 0. Row r belongs to batch element r / (rows per batch element).
Tensor masked_softmax(const Tensor& x, const AttentionMask& mask);

// Zeroes the entries of x whose position along `seq_axis` is invalid. Axis 0 is the batch.
Tensor apply_mask(const Tensor& x, const AttentionMask& mask, std::size_t seq_axis);

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // weights [C, C], biases [C]
};

// Scaled dot-product multi-head self-attention over x [B, L, C]. Masked keys are
// excluded and masked query rows output zero.
Tensor multihead_attention(const Tensor& x, const AttentionMask& mask, std::size_t heads,
                           const AttentionParams& p);

// Sum over rows of -log softmax(logits)[target]. logits [..., K] has one target per
// row. With a mask the softmax runs over valid positions only (as masked_softmax).
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets,
                     const AttentionMask* mask = nullptr);

// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng);

// ---- optimisation ----

enum class Stencil { ThreePoint, FivePoint };

// Max over sampled coordinates of |analytic - central difference| /
// max(|analytic|, |numeric|, 1e-8). Samples up to `max_coords` per parameter.
// The five-point stencil cancels the eps^2 truncation term.
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params, double eps,
                  std::size_t max_coords = 64, std::uint64_t seed = 0, Stencil stencil = Stencil::FivePoint);

class SGD {
 public:
  SGD(std::vector<Tensor> params, double lr, double momentum);

  // v <- momentum*v + g; p <- p - lr*v; then clears gradients. Throws
  // ValidationError("missing gradient") if a parameter has none.
  void step();
  void zero_grad();

  double lr() const { return lr_; }
  double momentum() const { return momentum_; }

 private:
  std::vector<Tensor> params_;
  double lr_;
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

// Byte accounting for live tensor storage on the calling thread.
struct MemoryStats {
  std::size_t current_bytes = 0;
  std::size_t peak_bytes = 0;
};
MemoryStats memory_stats();
// Sets the peak to the current live size.
void reset_peak_memory();

}  // namespace depthseq::tc
