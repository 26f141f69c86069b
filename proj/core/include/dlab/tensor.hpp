#pragma once

// Dense float64 tensors with a taped reverse-mode autodiff graph.
//
// A Tensor is a cheap handle onto a shared node. Operations allocate a new
// node whose value is fixed at construction; only leaf parameters are ever
// mutated in place (by optimizers). Gradient recording is controlled per
// thread by NoGradGuard.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dlab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

struct Node;

// Per-backward-call gradient buffers for the parents of a node. A null slot
// means the parent does not require a gradient.
using GradSlots = std::vector<std::vector<double>*>;
using BackwardFn = std::function<void(const Node& out, std::span<const double> grad_out, GradSlots& slots)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a backward pass reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access. Only valid on leaves (no recorded parents).
  std::span<double> mutable_data();
  double item() const;
  double operator[](std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Copy of the value with no graph history.
  Tensor detach() const;
  // Deep copy of the value; keeps the requires_grad flag but no history.
  Tensor clone() const;

  bool is_leaf() const;

  // Internal use by operations.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// Gradient recording switch, thread-local. While a guard is alive, new
// operations do not record parents.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Accumulates d(loss)/d(x) into x.grad for every requires_grad ancestor.
// Repeated calls accumulate. Throws ContractError for a non-scalar loss.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Operations. All differentiable unless stated otherwise.

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // NumericError on nonpositive entries
Tensor square(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor silu(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis, bool keepdim = false);
Tensor cumsum(const Tensor& a, std::size_t axis);

Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor reshape(const Tensor& a, Shape shape);
// Swaps the last two axes.
Tensor transpose(const Tensor& a);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

// a[..., m, k] x b[k, n] -> [..., m, n], or batched a[B, m, k] x b[B, k, n].
Tensor matmul(const Tensor& a, const Tensor& b);
// x[..., k] W[k, n] + bias[n]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

// Softmax over the last axis with max subtraction. NumericError on NaN.
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);
// Sets entries [..., t, s] with s > t to -inf (forward); their gradient is 0.
Tensor causal_fill(const Tensor& scores);

// x / sqrt(mean(x^2 over last axis) + eps) * weight.
Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps);

// Rows of table[V, D] selected by ids -> [ids.size(), D].
Tensor embedding(const Tensor& table, std::span<const int> ids);

// Mean next-token cross-entropy over rows with mask != 0.
// logits [N, V]; targets and mask have length N.
Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, std::span<const double> mask);

enum class KlDirection { forward, reverse };
// Token-level KL over the vocabulary averaged over rows with mask != 0.
// forward: KL(teacher || student); reverse: KL(student || teacher).
// teacher_logits is treated as a constant. DataError when every row is masked.
Tensor kl_divergence(const Tensor& student_logits, const Tensor& teacher_logits, std::span<const double> mask,
                     KlDirection direction);

// Raw kernel: C[m, n] (+)= A[m, k] B[k, n], row-major. Accumulation order per
// output element is fixed (k ascending) and independent of m.
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate);

}  // namespace dlab
