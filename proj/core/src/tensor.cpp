#include "dlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "dlab/error.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace dlab {

using detail::GradSlots;
using detail::Node;

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

thread_local bool t_grad_enabled = true;

#if defined(__GLIBC__)
// Activation buffers are freed and reallocated every step. With the default
// thresholds glibc hands each large block back to the kernel, and page faults
// then dominate training time.
const bool g_malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

void check_shape(const Shape& shape) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
}

std::shared_ptr<Node> make_node(Shape shape, std::vector<double> value) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

// Builds the result tensor; records parents and backward only when needed.
Tensor make_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& parents,
                   detail::BackwardFn fn) {
  auto node = make_node(std::move(shape), std::move(value));
  bool rg = false;
  if (t_grad_enabled) {
    for (const auto& p : parents) rg = rg || (p.defined() && p.requires_grad());
  }
  if (rg) {
    node->requires_grad = true;
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(fn);
  }
  return Tensor(std::move(node));
}

// Strides (in elements) of `shape` when broadcast into `out` (right aligned).
std::vector<std::size_t> broadcast_strides(const Shape& shape, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  const std::size_t off = out.size() - shape.size();
  for (std::size_t i = shape.size(); i-- > 0;) {
    strides[off + i] = (shape[i] == 1 && out[off + i] != 1) ? 0 : stride;
    stride *= shape[i];
  }
  return strides;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

// Flat offsets of a broadcast operand for every output element.
std::vector<std::size_t> broadcast_offsets(const Shape& shape, const Shape& out) {
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> offsets(n);
  if (shape == out) {
    std::iota(offsets.begin(), offsets.end(), std::size_t{0});
    return offsets;
  }
  const auto strides = broadcast_strides(shape, out);
  std::vector<std::size_t> idx(out.size(), 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    offsets[i] = off;
    for (std::size_t d = out.size(); d-- > 0;) {
      ++idx[d];
      off += strides[d];
      if (idx[d] < out[d]) break;
      off -= strides[d] * idx[d];
      idx[d] = 0;
    }
  }
  return offsets;
}

enum class BinOp { add, sub, mul, div };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  const std::size_t n = shape_numel(out_shape);
  auto ia = std::make_shared<std::vector<std::size_t>>(broadcast_offsets(a.shape(), out_shape));
  auto ib = std::make_shared<std::vector<std::size_t>>(broadcast_offsets(b.shape(), out_shape));
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<double> out(n);
  switch (op) {
    case BinOp::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[(*ia)[i]] + bv[(*ib)[i]];
      break;
    case BinOp::sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[(*ia)[i]] - bv[(*ib)[i]];
      break;
    case BinOp::mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[(*ia)[i]] * bv[(*ib)[i]];
      break;
    case BinOp::div:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[(*ia)[i]] / bv[(*ib)[i]];
      break;
  }
  return make_result(out_shape, std::move(out), {a, b},
                     [op, ia, ib](const Node& self, std::span<const double> g, GradSlots& slots) {
                       const auto& va = self.parents[0]->value;
                       const auto& vb = self.parents[1]->value;
                       const std::size_t n = g.size();
                       if (auto* ga = slots[0]) {
                         for (std::size_t i = 0; i < n; ++i) {
                           double d = g[i];
                           if (op == BinOp::mul) d *= vb[(*ib)[i]];
                           if (op == BinOp::div) d /= vb[(*ib)[i]];
                           (*ga)[(*ia)[i]] += d;
                         }
                       }
                       if (auto* gb = slots[1]) {
                         for (std::size_t i = 0; i < n; ++i) {
                           double d = g[i];
                           if (op == BinOp::sub) d = -d;
                           if (op == BinOp::mul) d *= va[(*ia)[i]];
                           if (op == BinOp::div) {
                             const double y = vb[(*ib)[i]];
                             d *= -va[(*ia)[i]] / (y * y);
                           }
                           (*gb)[(*ib)[i]] += d;
                         }
                       }
                     });
}

// Unary elementwise op: f gives the value, df the derivative from (x, y).
template <class F, class DF>
Tensor unary(const Tensor& a, F f, DF df) {
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  return make_result(a.shape(), std::move(out), {a},
                     [df](const Node& self, std::span<const double> g, GradSlots& slots) {
                       auto* ga = slots[0];
                       if (!ga) return;
                       const auto& x = self.parents[0]->value;
                       for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * df(x[i], self.value[i]);
                     });
}

void require_finite(std::span<const double> v, const char* op) {
  for (double x : v) {
    if (std::isnan(x)) throw NumericError(std::string(op) + ": NaN input");
  }
}

// Splits shape at `axis` into (outer, extent, inner).
struct AxisSplit {
  std::size_t outer, extent, inner;
};
AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) throw DimensionError(std::string(op) + ": axis out of range for " + shape_str(s));
  AxisSplit r{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  check_shape(shape);
  const auto n = shape_numel(shape);
  auto node = make_node(std::move(shape), std::vector<double>(n, value));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  check_shape(shape);
  if (values.size() != shape_numel(shape)) {
    throw DimensionError("data length " + std::to_string(values.size()) + " does not match shape " +
                         shape_str(shape));
  }
  auto node = make_node(std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
  if (!node_) throw ContractError("use of undefined tensor");
  return node_->value;
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw ContractError("use of undefined tensor");
  if (!node_->parents.empty()) throw ContractError("mutable_data on a non-leaf tensor");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw ContractError("set_requires_grad on a non-leaf tensor");
  node_->requires_grad = on;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw ContractError("tensor has no gradient");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(make_node(shape(), node_->value)); }

Tensor Tensor::clone() const {
  auto t = detach();
  t.node_->requires_grad = requires_grad();
  return t;
}

bool Tensor::is_leaf() const { return node_ && node_->parents.empty(); }

bool grad_enabled() { return t_grad_enabled; }
NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// backward

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  Node* root = loss.node().get();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_map<Node*, std::size_t> index;
  std::vector<std::pair<Node*, std::size_t>> stack{{root, 0}};
  std::unordered_map<Node*, bool> visited{{root, true}};
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited[p]) {
        visited[p] = true;
        stack.emplace_back(p, 0);
      }
    } else {
      index[node] = order.size();
      order.push_back(node);
      stack.pop_back();
    }
  }

  std::vector<std::vector<double>> scratch(order.size());
  scratch[index[root]].assign(1, 1.0);
  GradSlots slots;
  for (std::size_t i = order.size(); i-- > 0;) {
    Node* node = order[i];
    auto& g = scratch[i];
    if (g.empty()) continue;
    if (node->backward) {
      slots.assign(node->parents.size(), nullptr);
      for (std::size_t p = 0; p < node->parents.size(); ++p) {
        Node* parent = node->parents[p].get();
        if (!parent->requires_grad) continue;
        auto& pg = scratch[index[parent]];
        if (pg.empty()) pg.assign(parent->value.size(), 0.0);
        slots[p] = &pg;
      }
      node->backward(*node, g, slots);
    }
    if (node->grad.empty()) node->grad.assign(node->value.size(), 0.0);
    for (std::size_t j = 0; j < g.size(); ++j) node->grad[j] += g[j];
  }
}

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::mul, "mul"); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::div, "div"); }

Tensor scale(const Tensor& a, double factor) {
  return unary(a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
  return unary(a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double x : a.data()) {
    if (!(x > 0.0)) throw NumericError("log of nonpositive value " + std::to_string(x));
  }
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); }, [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 30.0 ? x : std::log1p(std::exp(x)); },
      [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Tensor silu(const Tensor& a) {
  return unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return make_result({1}, {s}, {a}, [](const Node&, std::span<const double> g, GradSlots& slots) {
    if (auto* ga = slots[0]) {
      for (auto& x : *ga) x += g[0];
    }
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum(const Tensor& a, std::size_t axis, bool keepdim) {
  const auto [outer, extent, inner] = split_axis(a.shape(), axis, "sum");
  Shape out_shape = a.shape();
  if (keepdim || out_shape.size() == 1) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  }
  const auto av = a.data();
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t e = 0; e < extent; ++e)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += av[(o * extent + e) * inner + i];
  return make_result(out_shape, std::move(out), {a},
                     [outer, extent, inner](const Node&, std::span<const double> g, GradSlots& slots) {
                       auto* ga = slots[0];
                       if (!ga) return;
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t e = 0; e < extent; ++e)
                           for (std::size_t i = 0; i < inner; ++i)
                             (*ga)[(o * extent + e) * inner + i] += g[o * inner + i];
                     });
}

Tensor mean(const Tensor& a, std::size_t axis, bool keepdim) {
  return scale(sum(a, axis, keepdim), 1.0 / static_cast<double>(a.dim(axis)));
}

Tensor cumsum(const Tensor& a, std::size_t axis) {
  const auto [outer, extent, inner] = split_axis(a.shape(), axis, "cumsum");
  const auto av = a.data();
  std::vector<double> out(av.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      double run = 0.0;
      for (std::size_t e = 0; e < extent; ++e) {
        const std::size_t k = (o * extent + e) * inner + i;
        run += av[k];
        out[k] = run;
      }
    }
  return make_result(a.shape(), std::move(out), {a},
                     [outer, extent, inner](const Node&, std::span<const double> g, GradSlots& slots) {
                       auto* ga = slots[0];
                       if (!ga) return;
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t i = 0; i < inner; ++i) {
                           double run = 0.0;
                           for (std::size_t e = extent; e-- > 0;) {
                             const std::size_t k = (o * extent + e) * inner + i;
                             run += g[k];
                             (*ga)[k] += run;
                           }
                         }
                     });
}

// ---------------------------------------------------------------------------
// Shape manipulation

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  if (broadcast_shape(a.shape(), shape, "broadcast_to") != shape) {
    throw DimensionError("broadcast_to: cannot broadcast " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  auto offsets = std::make_shared<std::vector<std::size_t>>(broadcast_offsets(a.shape(), shape));
  const auto av = a.data();
  std::vector<double> out(offsets->size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[(*offsets)[i]];
  return make_result(shape, std::move(out), {a},
                     [offsets](const Node&, std::span<const double> g, GradSlots& slots) {
                       if (auto* ga = slots[0]) {
                         for (std::size_t i = 0; i < g.size(); ++i) (*ga)[(*offsets)[i]] += g[i];
                       }
                     });
}

Tensor reshape(const Tensor& a, Shape shape) {
  check_shape(shape);
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  return make_result(std::move(shape), std::move(out), {a},
                     [](const Node&, std::span<const double> g, GradSlots& slots) {
                       if (auto* ga = slots[0]) {
                         for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                       }
                     });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  const Shape& in = a.shape();
  const std::size_t r = in.size();
  if (axes.size() != r) throw DimensionError("permute: axes rank mismatch for " + shape_str(in));
  std::vector<bool> seen(r, false);
  for (auto ax : axes) {
    if (ax >= r || seen[ax]) throw DimensionError("permute: invalid axes");
    seen[ax] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in[axes[i]];
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * in[i + 1];
  std::vector<std::size_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) strides[i] = in_strides[axes[i]];

  const std::size_t n = a.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(n);
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    (*src)[i] = off;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      off += strides[d];
      if (idx[d] < out_shape[d]) break;
      off -= strides[d] * idx[d];
      idx[d] = 0;
    }
  }
  const auto av = a.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = av[(*src)[i]];
  return make_result(out_shape, std::move(out), {a},
                     [src](const Node&, std::span<const double> g, GradSlots& slots) {
                       if (auto* ga = slots[0]) {
                         for (std::size_t i = 0; i < g.size(); ++i) (*ga)[(*src)[i]] += g[i];
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  const std::size_t r = a.rank();
  if (r < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_str(a.shape()));
  std::vector<std::size_t> axes(r);
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(a, axes);
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length) {
  const auto [outer, extent, inner] = split_axis(a.shape(), axis, "slice");
  if (length == 0 || start + length > extent) {
    throw DimensionError("slice: [" + std::to_string(start) + ", +" + std::to_string(length) + ") out of range for " +
                         shape_str(a.shape()));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = length;
  const auto av = a.data();
  std::vector<double> out(outer * length * inner);
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>((o * extent + start) * inner), length * inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * length * inner));
  return make_result(out_shape, std::move(out), {a},
                     [outer = outer, extent = extent, inner = inner, start, length](
                         const Node&, std::span<const double> g, GradSlots& slots) {
                       auto* ga = slots[0];
                       if (!ga) return;
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t j = 0; j < length * inner; ++j)
                           (*ga)[(o * extent + start) * inner + j] += g[o * length * inner + j];
                     });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& first = parts[0].shape();
  Shape out_shape = first;
  if (axis >= first.size()) throw DimensionError("concat: axis out of range");
  std::size_t total = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) throw DimensionError("concat: incompatible shapes " + shape_str(first) + " and " + shape_str(s));
    extents.push_back(s[axis]);
    total += s[axis];
  }
  out_shape[axis] = total;
  const auto [outer, unused, inner] = split_axis(first, axis, "concat");
  (void)unused;
  std::vector<double> out(outer * total * inner);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * extents[k] * inner), extents[k] * inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * inner));
    offset += extents[k];
  }
  return make_result(out_shape, std::move(out), parts,
                     [outer = outer, inner = inner, total, extents](const Node&, std::span<const double> g,
                                                                    GradSlots& slots) {
                       std::size_t offset = 0;
                       for (std::size_t k = 0; k < extents.size(); ++k) {
                         if (auto* gk = slots[k]) {
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t j = 0; j < extents[k] * inner; ++j)
                               (*gk)[o * extents[k] * inner + j] += g[(o * total + offset) * inner + j];
                         }
                         offset += extents[k];
                       }
                     });
}

// ---------------------------------------------------------------------------
// Matrix products

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate) {
  if (!accumulate) std::fill_n(c, m * n, 0.0);
  // Four rows share each load of B; every element still sums over p in
  // ascending order, so a row's result does not depend on m.
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    double* c0 = c + i * n;
    double* c1 = c0 + n;
    double* c2 = c1 + n;
    double* c3 = c2 + n;
    const double* a0 = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double x0 = a0[p], x1 = a0[k + p], x2 = a0[2 * k + p], x3 = a0[3 * k + p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        const double bj = bp[j];
        c0[j] += x0 * bj;
        c1[j] += x1 * bj;
        c2[j] += x2 * bj;
        c3[j] += x3 * bj;
      }
    }
  }
  for (; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

namespace {

// dA[m, k] += G[m, n] B[k, n]^T, computed against a transposed copy of B so
// the inner loop runs over contiguous rows.
void gemm_nt_acc(const double* g, const double* b, double* da, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> bt(n * k);
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  }
  gemm(g, bt.data(), da, m, n, k, true);
}

// dB[k, n] += A[m, k]^T G[m, n]
void gemm_tn_acc(const double* a, const double* g, double* db, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* gi = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      double* dbp = db + p * n;
      for (std::size_t j = 0; j < n; ++j) dbp[j] += aip * gi[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const auto fail = [&] {
    throw DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  };
  if (sa.size() < 2 || sb.size() < 2) fail();
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa.back();
  std::size_t batch = 1;
  bool shared_b = sb.size() == 2;
  if (shared_b) {
    if (sb[0] != k) fail();
    for (std::size_t i = 0; i + 2 < sa.size(); ++i) batch *= sa[i];
  } else {
    if (sb.size() != sa.size() || sb[sb.size() - 2] != k) fail();
    for (std::size_t i = 0; i + 2 < sa.size(); ++i) {
      if (sa[i] != sb[i]) fail();
      batch *= sa[i];
    }
  }
  const std::size_t n = sb.back();
  Shape out_shape = sa;
  out_shape.back() = n;
  std::vector<double> out(batch * m * n);
  const auto av = a.data();
  const auto bv = b.data();
  if (shared_b) {
    gemm(av.data(), bv.data(), out.data(), batch * m, k, n, false);
  } else {
    for (std::size_t t = 0; t < batch; ++t)
      gemm(av.data() + t * m * k, bv.data() + t * k * n, out.data() + t * m * n, m, k, n, false);
  }
  return make_result(out_shape, std::move(out), {a, b},
                     [batch, m, k, n, shared_b](const Node& self, std::span<const double> g, GradSlots& slots) {
                       const auto& va = self.parents[0]->value;
                       const auto& vb = self.parents[1]->value;
                       if (shared_b) {
                         if (slots[0]) gemm_nt_acc(g.data(), vb.data(), slots[0]->data(), batch * m, k, n);
                         if (slots[1]) gemm_tn_acc(va.data(), g.data(), slots[1]->data(), batch * m, k, n);
                         return;
                       }
                       for (std::size_t t = 0; t < batch; ++t) {
                         const double* gt = g.data() + t * m * n;
                         if (slots[0]) gemm_nt_acc(gt, vb.data() + t * k * n, slots[0]->data() + t * m * k, m, k, n);
                         if (slots[1]) gemm_tn_acc(va.data() + t * m * k, gt, slots[1]->data() + t * k * n, m, k, n);
                       }
                     });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const Shape& sx = x.shape();
  const Shape& sw = weight.shape();
  if (sw.size() != 2 || sx.empty() || sx.back() != sw[0]) {
    throw DimensionError("linear: incompatible shapes " + shape_str(sx) + " and " + shape_str(sw));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != sw[1])) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match " + shape_str(sw));
  }
  const std::size_t k = sw[0];
  const std::size_t n = sw[1];
  const std::size_t rows = x.numel() / k;
  Shape out_shape = sx;
  out_shape.back() = n;
  std::vector<double> out(rows * n);
  gemm(x.data().data(), weight.data().data(), out.data(), rows, k, n, false);
  if (bias.defined()) {
    const auto bv = bias.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bv[j];
  }
  std::vector<Tensor> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return make_result(out_shape, std::move(out), parents,
                     [rows, k, n](const Node& self, std::span<const double> g, GradSlots& slots) {
                       const auto& vx = self.parents[0]->value;
                       const auto& vw = self.parents[1]->value;
                       if (slots[0]) gemm_nt_acc(g.data(), vw.data(), slots[0]->data(), rows, k, n);
                       if (slots[1]) gemm_tn_acc(vx.data(), g.data(), slots[1]->data(), rows, k, n);
                       if (slots.size() > 2 && slots[2]) {
                         auto& gb = *slots[2];
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
                       }
                     });
}

// ---------------------------------------------------------------------------
// Softmax family

Tensor softmax_rows(const Tensor& a) {
  const auto av = a.data();
  require_finite(av, "softmax_rows");
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.numel() / n;
  std::vector<double> out(av.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * n;
    double* y = out.data() + r * n;
    const double mx = *std::max_element(x, x + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - mx);
      s += y[j];
    }
    const double inv = 1.0 / s;
    for (std::size_t j = 0; j < n; ++j) y[j] *= inv;
  }
  return make_result(a.shape(), std::move(out), {a},
                     [rows, n](const Node& self, std::span<const double> g, GradSlots& slots) {
                       auto* ga = slots[0];
                       if (!ga) return;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* y = self.value.data() + r * n;
                         const double* gr = g.data() + r * n;
                         double dot = 0.0;
                         for (std::size_t j = 0; j < n; ++j) dot += gr[j] * y[j];
                         for (std::size_t j = 0; j < n; ++j) (*ga)[r * n + j] += y[j] * (gr[j] - dot);
                       }
                     });
}

Tensor log_softmax_rows(const Tensor& a) {
  const auto av = a.data();
  require_finite(av, "log_softmax_rows");
  const std::size_t n = a.shape().back();
  const std::size_t rows = a.numel() / n;
  std::vector<double> out(av.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * n;
    double* y = out.data() + r * n;
    const double mx = *std::max_element(x, x + n);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(x[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) y[j] = x[j] - lse;
  }
  return make_result(a.shape(), std::move(out), {a},
                     [rows, n](const Node& self, std::span<const double> g, GradSlots& slots) {
                       auto* ga = slots[0];
                       if (!ga) return;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* y = self.value.data() + r * n;
                         const double* gr = g.data() + r * n;
                         double gs = 0.0;
                         for (std::size_t j = 0; j < n; ++j) gs += gr[j];
                         for (std::size_t j = 0; j < n; ++j) (*ga)[r * n + j] += gr[j] - std::exp(y[j]) * gs;
                       }
                     });
}

Tensor causal_fill(const Tensor& scores) {
  const Shape& s = scores.shape();
  if (s.size() < 2 || s[s.size() - 1] != s[s.size() - 2]) {
    throw DimensionError("causal_fill needs [..., L, L], got " + shape_str(s));
  }
  const std::size_t L = s.back();
  const std::size_t mats = scores.numel() / (L * L);
  std::vector<double> out(scores.data().begin(), scores.data().end());
  const double ninf = -std::numeric_limits<double>::infinity();
  for (std::size_t m = 0; m < mats; ++m)
    for (std::size_t t = 0; t < L; ++t)
      for (std::size_t u = t + 1; u < L; ++u) out[(m * L + t) * L + u] = ninf;
  return make_result(s, std::move(out), {scores},
                     [mats, L](const Node&, std::span<const double> g, GradSlots& slots) {
                       auto* ga = slots[0];
                       if (!ga) return;
                       for (std::size_t m = 0; m < mats; ++m)
                         for (std::size_t t = 0; t < L; ++t)
                           for (std::size_t u = 0; u <= t; ++u) (*ga)[(m * L + t) * L + u] += g[(m * L + t) * L + u];
                     });
}

Tensor rmsnorm(const Tensor& x, const Tensor& weight, double eps) {
  const std::size_t n = x.shape().back();
  if (weight.rank() != 1 || weight.dim(0) != n) {
    throw DimensionError("rmsnorm: weight " + shape_str(weight.shape()) + " for input " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  const auto xv = x.data();
  const auto wv = weight.data();
  auto inv_rms = std::make_shared<std::vector<double>>(rows);
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * n;
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += xr[j] * xr[j];
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
    (*inv_rms)[r] = inv;
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xr[j] * inv * wv[j];
  }
  return make_result(x.shape(), std::move(out), {x, weight},
                     [rows, n, inv_rms](const Node& self, std::span<const double> g, GradSlots& slots) {
                       const auto& xv = self.parents[0]->value;
                       const auto& wv = self.parents[1]->value;
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* xr = xv.data() + r * n;
                         const double* gr = g.data() + r * n;
                         const double inv = (*inv_rms)[r];
                         if (slots[1]) {
                           for (std::size_t j = 0; j < n; ++j) (*slots[1])[j] += gr[j] * xr[j] * inv;
                         }
                         if (slots[0]) {
                           // d/dx_i of x_i*inv*w_i: inv*w_i*g_i - x_i*inv^3/n * sum_j g_j w_j x_j
                           double dot = 0.0;
                           for (std::size_t j = 0; j < n; ++j) dot += gr[j] * wv[j] * xr[j];
                           const double c = dot * inv * inv * inv / static_cast<double>(n);
                           for (std::size_t j = 0; j < n; ++j)
                             (*slots[0])[r * n + j] += gr[j] * wv[j] * inv - xr[j] * c;
                         }
                       }
                     });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw DimensionError("embedding table must be rank 2, got " + shape_str(table.shape()));
  const std::size_t V = table.dim(0);
  const std::size_t D = table.dim(1);
  if (ids.empty()) throw DimensionError("embedding: empty id list");
  auto rows = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  std::vector<double> out(ids.size() * D);
  const auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= V) {
      throw DataError("token id " + std::to_string(ids[i]) + " outside vocabulary of size " + std::to_string(V));
    }
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * D), D,
                out.begin() + static_cast<std::ptrdiff_t>(i * D));
  }
  return make_result({ids.size(), D}, std::move(out), {table},
                     [rows, D](const Node&, std::span<const double> g, GradSlots& slots) {
                       auto* gt = slots[0];
                       if (!gt) return;
                       for (std::size_t i = 0; i < rows->size(); ++i)
                         for (std::size_t j = 0; j < D; ++j)
                           (*gt)[static_cast<std::size_t>((*rows)[i]) * D + j] += g[i * D + j];
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, std::span<const double> mask) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be [N, V], got " + shape_str(logits.shape()));
  const std::size_t N = logits.dim(0);
  const std::size_t V = logits.dim(1);
  if (targets.size() != N || mask.size() != N) throw DimensionError("cross_entropy: targets/mask length mismatch");
  double weight = 0.0;
  for (double m : mask) weight += m;
  if (weight <= 0.0) throw DataError("cross_entropy: every position is masked");
  const auto lv = logits.data();
  require_finite(lv, "cross_entropy");
  auto probs = std::make_shared<std::vector<double>>(N * V);
  double loss = 0.0;
  for (std::size_t r = 0; r < N; ++r) {
    if (mask[r] == 0.0) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= V) {
      throw DataError("cross_entropy: target id " + std::to_string(targets[r]) + " out of range");
    }
    const double* x = lv.data() + r * V;
    double* p = probs->data() + r * V;
    const double mx = *std::max_element(x, x + V);
    double s = 0.0;
    for (std::size_t j = 0; j < V; ++j) {
      p[j] = std::exp(x[j] - mx);
      s += p[j];
    }
    for (std::size_t j = 0; j < V; ++j) p[j] /= s;
    loss -= mask[r] * (x[targets[r]] - mx - std::log(s));
  }
  loss /= weight;
  auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  auto msk = std::make_shared<std::vector<double>>(mask.begin(), mask.end());
  return make_result({1}, {loss}, {logits},
                     [N, V, weight, probs, tgt, msk](const Node&, std::span<const double> g, GradSlots& slots) {
                       auto* gl = slots[0];
                       if (!gl) return;
                       for (std::size_t r = 0; r < N; ++r) {
                         const double m = (*msk)[r];
                         if (m == 0.0) continue;
                         const double c = g[0] * m / weight;
                         for (std::size_t j = 0; j < V; ++j) (*gl)[r * V + j] += c * (*probs)[r * V + j];
                         (*gl)[r * V + static_cast<std::size_t>((*tgt)[r])] -= c;
                       }
                     });
}

Tensor kl_divergence(const Tensor& student_logits, const Tensor& teacher_logits, std::span<const double> mask,
                     KlDirection direction) {
  if (student_logits.shape() != teacher_logits.shape()) {
    throw DimensionError("kl_divergence: student " + shape_str(student_logits.shape()) + " vs teacher " +
                         shape_str(teacher_logits.shape()));
  }
  const std::size_t V = student_logits.shape().back();
  const std::size_t N = student_logits.numel() / V;
  if (mask.size() != N) throw DimensionError("kl_divergence: mask length mismatch");
  double weight = 0.0;
  for (double m : mask) weight += m;
  if (weight <= 0.0) throw DataError("kl_divergence: every position is masked");

  const auto sv = student_logits.data();
  const auto tv = teacher_logits.data();
  require_finite(sv, "kl_divergence");
  auto logp_s = std::make_shared<std::vector<double>>(N * V);
  auto logp_t = std::make_shared<std::vector<double>>(N * V);
  const auto log_softmax_row = [V](const double* x, double* y) {
    const double mx = *std::max_element(x, x + V);
    double s = 0.0;
    for (std::size_t j = 0; j < V; ++j) s += std::exp(x[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < V; ++j) y[j] = x[j] - lse;
  };
  double loss = 0.0;
  for (std::size_t r = 0; r < N; ++r) {
    if (mask[r] == 0.0) continue;
    double* ls = logp_s->data() + r * V;
    double* lt = logp_t->data() + r * V;
    log_softmax_row(sv.data() + r * V, ls);
    log_softmax_row(tv.data() + r * V, lt);
    double kl = 0.0;
    for (std::size_t j = 0; j < V; ++j) {
      if (direction == KlDirection::forward) {
        kl += std::exp(lt[j]) * (lt[j] - ls[j]);
      } else {
        kl += std::exp(ls[j]) * (ls[j] - lt[j]);
      }
    }
    loss += mask[r] * kl;
  }
  loss /= weight;
  auto msk = std::make_shared<std::vector<double>>(mask.begin(), mask.end());
  return make_result(
      {1}, {loss}, {student_logits},
      [N, V, weight, logp_s, logp_t, msk, direction](const Node&, std::span<const double> g, GradSlots& slots) {
        auto* gs = slots[0];
        if (!gs) return;
        for (std::size_t r = 0; r < N; ++r) {
          const double m = (*msk)[r];
          if (m == 0.0) continue;
          const double c = g[0] * m / weight;
          const double* ls = logp_s->data() + r * V;
          const double* lt = logp_t->data() + r * V;
          if (direction == KlDirection::forward) {
            // d/dz_j sum_i p_t,i (log p_t,i - log p_s,i) = p_s,j - p_t,j
            for (std::size_t j = 0; j < V; ++j) (*gs)[r * V + j] += c * (std::exp(ls[j]) - std::exp(lt[j]));
          } else {
            // d/dz_j sum_i p_s,i (log p_s,i - log p_t,i) = p_s,j (d_j - KL), d_j = log p_s,j - log p_t,j
            double kl = 0.0;
            for (std::size_t j = 0; j < V; ++j) kl += std::exp(ls[j]) * (ls[j] - lt[j]);
            for (std::size_t j = 0; j < V; ++j) (*gs)[r * V + j] += c * std::exp(ls[j]) * (ls[j] - lt[j] - kl);
          }
        }
      });
}

}  // namespace dlab
