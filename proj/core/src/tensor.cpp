#include "ktir/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <unordered_set>

#include "ktir/errors.hpp"

namespace ktir {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
  }
};

struct NodeAccess {
  static const std::shared_ptr<Node>& node(const Tensor& t) { return t.node_; }
  static Tensor wrap(std::shared_ptr<Node> n) { return Tensor(std::move(n)); }
};

}  // namespace detail

namespace {

using detail::Node;
using detail::NodeAccess;
using NodePtr = std::shared_ptr<Node>;

std::atomic<std::uint64_t> g_next_id{1};
thread_local bool t_grad_enabled = true;

NodePtr new_node(Shape shape, std::vector<double> value) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  return n;
}

const NodePtr& node_of(const Tensor& t) {
  const auto& n = NodeAccess::node(t);
  if (!n) throw InvalidArgument("operation on an undefined tensor");
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Builds the output node; wires the backward closure only when some input
// needs a gradient and recording is enabled.
Tensor make_result(Shape shape, std::vector<double> value,
                   std::initializer_list<NodePtr> inputs,
                   std::function<void(Node&)> backward_fn) {
  auto out = new_node(std::move(shape), std::move(value));
  if (t_grad_enabled) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in->requires_grad;
    if (needs) {
      out->requires_grad = true;
      out->parents.assign(inputs.begin(), inputs.end());
      out->backward_fn = std::move(backward_fn);
    }
  }
  return NodeAccess::wrap(std::move(out));
}

Tensor make_result_n(Shape shape, std::vector<double> value,
                     std::vector<NodePtr> inputs,
                     std::function<void(Node&)> backward_fn) {
  auto out = new_node(std::move(shape), std::move(value));
  if (t_grad_enabled) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in->requires_grad;
    if (needs) {
      out->requires_grad = true;
      out->parents = std::move(inputs);
      out->backward_fn = std::move(backward_fn);
    }
  }
  return NodeAccess::wrap(std::move(out));
}

std::size_t rows_of(const Shape& s) { return s.size() == 2 ? s[0] : 1; }
std::size_t cols_of(const Shape& s) { return s.empty() ? 1 : s.back(); }

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeMismatch(std::string(op) + ": expected a matrix, got " +
                        shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeMismatch(std::string(op) + ": " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  }
}

// C[n x p] += A[n x k] * B[k x p]
void gemm_nn(const double* a, const double* b, double* c, std::size_t n,
             std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = c + i * p;
    const double* arow = a + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = arow[l];
      if (av == 0.0) continue;
      const double* brow = b + l * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[n x k] += A[n x p] * B[k x p]^T
void gemm_nt(const double* a, const double* b, double* c, std::size_t n,
             std::size_t p, std::size_t k) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a + i * p;
    for (std::size_t l = 0; l < k; ++l) {
      const double* brow = b + l * p;
      double acc = 0.0;
      for (std::size_t j = 0; j < p; ++j) acc += arow[j] * brow[j];
      c[i * k + l] += acc;
    }
  }
}

// C[k x p] += A[n x k]^T * B[n x p]
void gemm_tn(const double* a, const double* b, double* c, std::size_t n,
             std::size_t k, std::size_t p) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * p;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = arow[l];
      if (av == 0.0) continue;
      double* crow = c + l * p;
      for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}

// Iteration over 1-D lanes of a tensor along a given axis.
struct Lanes {
  std::size_t count;
  std::size_t length;
  std::size_t stride;
  std::size_t offset(std::size_t lane) const {
    return stride == 1 ? lane * length : lane;
  }
};

Lanes lanes_for(const Shape& shape, int axis) {
  const std::size_t r = rows_of(shape);
  const std::size_t c = cols_of(shape);
  if (axis == -1 || shape.size() < 2 || axis == static_cast<int>(shape.size()) - 1) {
    return {r, c, 1};
  }
  if (axis == 0) return {c, r, c};
  throw ShapeMismatch("unsupported axis " + std::to_string(axis));
}

template <typename F>
Tensor unary(const Tensor& x, F forward, std::function<double(double, double)> deriv) {
  const auto& xn = node_of(x);
  std::vector<double> out(xn->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(xn->value[i]);
  return make_result(xn->shape, std::move(out), {xn},
                     [xn, deriv](Node& self) {
                       if (!xn->requires_grad) return;
                       xn->ensure_grad();
                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                         xn->grad[i] += self.grad[i] * deriv(xn->value[i], self.value[i]);
                       }
                     });
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape.size() > 2) throw ShapeMismatch("rank > 2 is not supported");
  if (shape_numel(shape) != data.size()) {
    throw ShapeMismatch("data size " + std::to_string(data.size()) +
                        " does not match shape " + shape_str(shape));
  }
  auto n = new_node(std::move(shape), std::move(data));
  n->requires_grad = requires_grad;
  if (requires_grad) n->ensure_grad();
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_of(*this)->shape; }
std::size_t Tensor::numel() const { return node_of(*this)->value.size(); }
std::size_t Tensor::rows() const { return rows_of(shape()); }
std::size_t Tensor::cols() const { return cols_of(shape()); }

std::span<const double> Tensor::data() const { return node_of(*this)->value; }
std::span<double> Tensor::mutable_data() { return node_of(*this)->value; }

double Tensor::item() const {
  const auto& n = node_of(*this);
  if (n->value.size() != 1) {
    throw NotScalar("item() on tensor of shape " + shape_str(n->shape));
  }
  return n->value[0];
}

bool Tensor::requires_grad() const { return node_of(*this)->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  const auto& n = node_of(*this);
  n->requires_grad = flag;
  if (flag) n->ensure_grad();
}

std::span<const double> Tensor::grad() const { return node_of(*this)->grad; }

std::span<double> Tensor::mutable_grad() {
  const auto& n = node_of(*this);
  n->ensure_grad();
  return n->grad;
}

void Tensor::zero_grad() {
  const auto& n = node_of(*this);
  n->grad.assign(n->value.size(), 0.0);
}

std::uint64_t Tensor::tape_id() const { return node_of(*this)->id; }

Tensor Tensor::detach() const {
  const auto& n = node_of(*this);
  return from_data(n->shape, n->value, false);
}

Tensor Tensor::clone() const {
  const auto& n = node_of(*this);
  return from_data(n->shape, n->value, n->requires_grad);
}

// ---- tape ------------------------------------------------------------------

void backward(const Tensor& loss) {
  const auto& root = node_of(loss);
  if (root->value.size() != 1) {
    throw NotScalar("backward() needs a scalar loss, got " + shape_str(root->shape));
  }
  if (!root->requires_grad) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  // Parents are always created before children, so descending id order is a
  // valid reverse topological order.
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->id > b->id; });

  root->ensure_grad();
  root->grad[0] += 1.0;
  for (Node* n : order) {
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t n = a.shape()[0], k = a.shape()[1], p = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeMismatch("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const auto& an = node_of(a);
  const auto& bn = node_of(b);
  std::vector<double> out(n * p, 0.0);
  gemm_nn(an->value.data(), bn->value.data(), out.data(), n, k, p);
  return make_result({n, p}, std::move(out), {an, bn}, [an, bn, n, k, p](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      gemm_nt(self.grad.data(), bn->value.data(), an->grad.data(), n, p, k);
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      gemm_tn(an->value.data(), self.grad.data(), bn->grad.data(), n, k, p);
    }
  });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  const auto& an = node_of(a);
  std::vector<double> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = an->value[i * c + j];
  return make_result({c, r}, std::move(out), {an}, [an, r, c](Node& self) {
    if (!an->requires_grad) return;
    an->ensure_grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) an->grad[i * c + j] += self.grad[j * r + i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape.size() > 2) throw ShapeMismatch("rank > 2 is not supported");
  if (shape_numel(shape) != x.numel()) {
    throw ShapeMismatch("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  const auto& xn = node_of(x);
  return make_result(std::move(shape), xn->value, {xn}, [xn](Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
  });
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto& an = node_of(a);
  const auto& bn = node_of(b);
  std::vector<double> out(an->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->value[i] + bn->value[i];
  return make_result(an->shape, std::move(out), {an, bn}, [an, bn](Node& self) {
    for (const auto& in : {an, bn}) {
      if (!in->requires_grad) continue;
      in->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto& an = node_of(a);
  const auto& bn = node_of(b);
  std::vector<double> out(an->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->value[i] - bn->value[i];
  return make_result(an->shape, std::move(out), {an, bn}, [an, bn](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
    }
  });
}

Tensor add_row(const Tensor& x, const Tensor& row_vec) {
  const std::size_t c = x.cols();
  if (row_vec.numel() != c || row_vec.rank() != 1) {
    throw ShapeMismatch("add_row: " + shape_str(x.shape()) + " + " +
                        shape_str(row_vec.shape()));
  }
  const std::size_t r = x.rows();
  const auto& xn = node_of(x);
  const auto& bn = node_of(row_vec);
  std::vector<double> out(xn->value);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += bn->value[j];
  return make_result(xn->shape, std::move(out), {xn, bn}, [xn, bn, r, c](Node& self) {
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) bn->grad[j] += self.grad[i * c + j];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto& an = node_of(a);
  const auto& bn = node_of(b);
  std::vector<double> out(an->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->value[i] * bn->value[i];
  return make_result(an->shape, std::move(out), {an, bn}, [an, bn](Node& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        an->grad[i] += self.grad[i] * bn->value[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        bn->grad[i] += self.grad[i] * an->value[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  const auto& xn = node_of(x);
  std::vector<double> out(xn->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xn->value[i] * factor;
  return make_result(xn->shape, std::move(out), {xn}, [xn, factor](Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * factor;
  });
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw NotScalar("scale_by: factor must be a scalar");
  const auto& xn = node_of(x);
  const auto& sn = node_of(s);
  const double f = sn->value[0];
  std::vector<double> out(xn->value.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xn->value[i] * f;
  return make_result(xn->shape, std::move(out), {xn, sn}, [xn, sn](Node& self) {
    const double f = sn->value[0];
    if (xn->requires_grad) {
      xn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * f;
    }
    if (sn->requires_grad) {
      sn->ensure_grad();
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * xn->value[i];
      sn->grad[0] += acc;
    }
  });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); },
      [inv_sqrt_2pi](double v, double) {
        return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) +
               v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor log(const Tensor& x) {
  return unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  return unary(
      x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
      [lo, hi](double v, double) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---- row-wise --------------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
  const auto& xn = node_of(x);
  const Lanes lanes = lanes_for(xn->shape, axis);
  std::vector<double> out(xn->value.size());
  for (std::size_t l = 0; l < lanes.count; ++l) {
    const std::size_t off = lanes.offset(l);
    double mx = -INFINITY;
    for (std::size_t i = 0; i < lanes.length; ++i)
      mx = std::max(mx, xn->value[off + i * lanes.stride]);
    double total = 0.0;
    for (std::size_t i = 0; i < lanes.length; ++i) {
      const std::size_t idx = off + i * lanes.stride;
      out[idx] = std::exp(xn->value[idx] - mx);
      total += out[idx];
    }
    for (std::size_t i = 0; i < lanes.length; ++i) out[off + i * lanes.stride] /= total;
  }
  return make_result(xn->shape, std::move(out), {xn}, [xn, lanes](Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t l = 0; l < lanes.count; ++l) {
      const std::size_t off = lanes.offset(l);
      double dot = 0.0;
      for (std::size_t i = 0; i < lanes.length; ++i) {
        const std::size_t idx = off + i * lanes.stride;
        dot += self.grad[idx] * self.value[idx];
      }
      for (std::size_t i = 0; i < lanes.length; ++i) {
        const std::size_t idx = off + i * lanes.stride;
        xn->grad[idx] += self.value[idx] * (self.grad[idx] - dot);
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, int axis) {
  const auto& xn = node_of(x);
  const Lanes lanes = lanes_for(xn->shape, axis);
  std::vector<double> out(xn->value.size());
  for (std::size_t l = 0; l < lanes.count; ++l) {
    const std::size_t off = lanes.offset(l);
    double mx = -INFINITY;
    for (std::size_t i = 0; i < lanes.length; ++i)
      mx = std::max(mx, xn->value[off + i * lanes.stride]);
    double total = 0.0;
    for (std::size_t i = 0; i < lanes.length; ++i)
      total += std::exp(xn->value[off + i * lanes.stride] - mx);
    const double lse = mx + std::log(total);
    for (std::size_t i = 0; i < lanes.length; ++i) {
      const std::size_t idx = off + i * lanes.stride;
      out[idx] = xn->value[idx] - lse;
    }
  }
  return make_result(xn->shape, std::move(out), {xn}, [xn, lanes](Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t l = 0; l < lanes.count; ++l) {
      const std::size_t off = lanes.offset(l);
      double gsum = 0.0;
      for (std::size_t i = 0; i < lanes.length; ++i) gsum += self.grad[off + i * lanes.stride];
      for (std::size_t i = 0; i < lanes.length; ++i) {
        const std::size_t idx = off + i * lanes.stride;
        xn->grad[idx] += self.grad[idx] - std::exp(self.value[idx]) * gsum;
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t r = x.rows(), c = x.cols();
  if (gain.numel() != c || bias.numel() != c) {
    throw ShapeMismatch("layer_norm: affine parameters must have " + std::to_string(c) +
                        " entries");
  }
  if (c == 0) throw ShapeMismatch("layer_norm: empty rows");
  const auto& xn = node_of(x);
  const auto& gn = node_of(gain);
  const auto& bn = node_of(bias);
  auto normalized = std::make_shared<std::vector<double>>(xn->value.size());
  auto inv_std = std::make_shared<std::vector<double>>(r);
  std::vector<double> out(xn->value.size());
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xn->value.data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += row[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (row[j] - mu) * is;
      (*normalized)[i * c + j] = h;
      out[i * c + j] = h * gn->value[j] + bn->value[j];
    }
  }
  return make_result(
      xn->shape, std::move(out), {xn, gn, bn},
      [xn, gn, bn, normalized, inv_std, r, c](Node& self) {
        const auto& xh = *normalized;
        if (gn->requires_grad) {
          gn->ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j)
              gn->grad[j] += self.grad[i * c + j] * xh[i * c + j];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) bn->grad[j] += self.grad[i * c + j];
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          const double inv_c = 1.0 / static_cast<double>(c);
          for (std::size_t i = 0; i < r; ++i) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double dh = self.grad[i * c + j] * gn->value[j];
              m1 += dh;
              m2 += dh * xh[i * c + j];
            }
            m1 *= inv_c;
            m2 *= inv_c;
            for (std::size_t j = 0; j < c; ++j) {
              const double dh = self.grad[i * c + j] * gn->value[j];
              xn->grad[i * c + j] += (*inv_std)[i] * (dh - m1 - xh[i * c + j] * m2);
            }
          }
        }
      });
}

Tensor l2_normalize(const Tensor& x) {
  const std::size_t r = x.rows(), c = x.cols();
  const auto& xn = node_of(x);
  auto norms = std::make_shared<std::vector<double>>(r);
  std::vector<double> out(xn->value.size());
  for (std::size_t i = 0; i < r; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < c; ++j) ss += xn->value[i * c + j] * xn->value[i * c + j];
    const double nrm = std::max(std::sqrt(ss), 1e-12);
    (*norms)[i] = nrm;
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xn->value[i * c + j] / nrm;
  }
  return make_result(xn->shape, std::move(out), {xn}, [xn, norms, r, c](Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += self.grad[i * c + j] * self.value[i * c + j];
      for (std::size_t j = 0; j < c; ++j) {
        xn->grad[i * c + j] +=
            (self.grad[i * c + j] - self.value[i * c + j] * dot) / (*norms)[i];
      }
    }
  });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) {
    throw ShapeMismatch("cosine_similarity: " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  }
  auto as_matrix = [](const Tensor& t) {
    return t.rank() == 2 ? t : reshape(t, {t.rows(), t.cols()});
  };
  return matmul(l2_normalize(as_matrix(a)), transpose(l2_normalize(as_matrix(b))));
}

// ---- gather / structural ---------------------------------------------------

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  require_rank2(table, "embedding");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  const auto& tn = node_of(table);
  std::vector<int> idx(ids.begin(), ids.end());
  std::vector<double> out(idx.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab) {
      throw InvalidArgument("embedding: id " + std::to_string(idx[i]) +
                            " outside table of " + std::to_string(vocab));
    }
    std::copy_n(tn->value.begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  const std::size_t n = idx.size();
  return make_result({n, d}, std::move(out), {tn},
                     [tn, idx = std::move(idx), d](Node& self) {
                       if (!tn->requires_grad) return;
                       tn->ensure_grad();
                       for (std::size_t i = 0; i < idx.size(); ++i)
                         for (std::size_t j = 0; j < d; ++j)
                           tn->grad[static_cast<std::size_t>(idx[i]) * d + j] +=
                               self.grad[i * d + j];
                     });
}

Tensor concat(std::initializer_list<Tensor> parts, int axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw InvalidArgument("concat: no inputs");
  const std::size_t rank = parts[0].rank();
  std::vector<NodePtr> inputs;
  inputs.reserve(parts.size());
  for (const auto& p : parts) {
    if (p.rank() != rank) throw ShapeMismatch("concat: mixed ranks");
    inputs.push_back(node_of(p));
  }

  if (rank <= 1) {
    std::vector<double> out;
    for (const auto& n : inputs) out.insert(out.end(), n->value.begin(), n->value.end());
    const std::size_t total = out.size();
    return make_result_n({total}, std::move(out), inputs, [inputs](Node& self) {
      std::size_t off = 0;
      for (const auto& n : inputs) {
        if (n->requires_grad) {
          n->ensure_grad();
          for (std::size_t i = 0; i < n->value.size(); ++i) n->grad[i] += self.grad[off + i];
        }
        off += n->value.size();
      }
    });
  }

  if (axis == 0) {
    const std::size_t c = parts[0].shape()[1];
    std::size_t r = 0;
    std::vector<double> out;
    for (const auto& p : parts) {
      if (p.shape()[1] != c) throw ShapeMismatch("concat axis 0: column mismatch");
      r += p.shape()[0];
      out.insert(out.end(), p.data().begin(), p.data().end());
    }
    return make_result_n({r, c}, std::move(out), inputs, [inputs](Node& self) {
      std::size_t off = 0;
      for (const auto& n : inputs) {
        if (n->requires_grad) {
          n->ensure_grad();
          for (std::size_t i = 0; i < n->value.size(); ++i) n->grad[i] += self.grad[off + i];
        }
        off += n->value.size();
      }
    });
  }

  if (axis == 1 || axis == -1) {
    const std::size_t r = parts[0].shape()[0];
    std::size_t c = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
      if (p.shape()[0] != r) throw ShapeMismatch("concat axis 1: row mismatch");
      widths.push_back(p.shape()[1]);
      c += p.shape()[1];
    }
    std::vector<double> out(r * c);
    std::size_t col = 0;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < widths[k]; ++j)
          out[i * c + col + j] = inputs[k]->value[i * widths[k] + j];
      col += widths[k];
    }
    return make_result_n({r, c}, std::move(out), inputs, [inputs, widths, r, c](Node& self) {
      std::size_t col = 0;
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        const auto& n = inputs[k];
        if (n->requires_grad) {
          n->ensure_grad();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < widths[k]; ++j)
              n->grad[i * widths[k] + j] += self.grad[i * c + col + j];
        }
        col += widths[k];
      }
    });
  }
  throw ShapeMismatch("concat: unsupported axis " + std::to_string(axis));
}

Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end) {
  const auto& xn = node_of(x);
  if (x.rank() <= 1) {
    if (begin > end || end > x.numel()) throw ShapeMismatch("slice: range out of bounds");
    std::vector<double> out(xn->value.begin() + static_cast<std::ptrdiff_t>(begin),
                            xn->value.begin() + static_cast<std::ptrdiff_t>(end));
    return make_result({end - begin}, std::move(out), {xn}, [xn, begin](Node& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) xn->grad[begin + i] += self.grad[i];
    });
  }
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  if (axis == 0) {
    if (begin > end || end > r) throw ShapeMismatch("slice: row range out of bounds");
    std::vector<double> out(xn->value.begin() + static_cast<std::ptrdiff_t>(begin * c),
                            xn->value.begin() + static_cast<std::ptrdiff_t>(end * c));
    return make_result({end - begin, c}, std::move(out), {xn}, [xn, begin, c](Node& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        xn->grad[begin * c + i] += self.grad[i];
    });
  }
  if (axis == 1 || axis == -1) {
    if (begin > end || end > c) throw ShapeMismatch("slice: column range out of bounds");
    const std::size_t w = end - begin;
    std::vector<double> out(r * w);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * w + j] = xn->value[i * c + begin + j];
    return make_result({r, w}, std::move(out), {xn}, [xn, begin, r, c, w](Node& self) {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) xn->grad[i * c + begin + j] += self.grad[i * w + j];
    });
  }
  throw ShapeMismatch("slice: unsupported axis " + std::to_string(axis));
}

Tensor row(const Tensor& x, std::size_t r) {
  require_rank2(x, "row");
  return reshape(slice(x, 0, r, r + 1), {x.cols()});
}

Tensor stack_rows(std::span<const Tensor> rows) {
  if (rows.empty()) throw InvalidArgument("stack_rows: no inputs");
  std::vector<Tensor> mats;
  mats.reserve(rows.size());
  for (const auto& r : rows) {
    if (r.rank() != 1) throw ShapeMismatch("stack_rows: inputs must be vectors");
    mats.push_back(reshape(r, {1, r.numel()}));
  }
  return concat(std::span<const Tensor>(mats), 0);
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& x) {
  const auto& xn = node_of(x);
  double total = 0.0;
  for (double v : xn->value) total += v;
  return make_result({}, {total}, {xn}, [xn](Node& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (auto& g : xn->grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeMismatch("mean of an empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

}  // namespace ktir
