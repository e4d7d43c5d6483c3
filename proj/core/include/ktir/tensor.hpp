#pragma once

// Dense 64-bit tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a shared node. Operations on tensors that
// require gradients record their inputs and a backward closure; calling
// backward() on a scalar result walks the recorded nodes in reverse creation
// order and accumulates gradients into every reachable node.
//
// Tensors are rank 0 (scalar), rank 1 (vector) or rank 2 (matrix), stored
// row-major. Row-wise operations treat a vector as a single row. The only
// implicit broadcast is add_row(), which adds a vector to every row.

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <vector>

namespace ktir {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);

namespace detail {
struct Node;
struct NodeAccess;
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  // Leading dimension for matrices, 1 for vectors and scalars.
  std::size_t rows() const;
  // Trailing dimension; 1 for scalars.
  std::size_t cols() const;

  std::span<const double> data() const;
  // Direct write access. Only meaningful on leaf tensors (parameters,
  // inputs); writing into an interior node does not re-run the graph.
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t i) const { return data()[i]; }
  double at(std::size_t r, std::size_t c) const { return data()[r * cols() + c]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  // Empty span when no gradient has been accumulated.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  // Node sequence number. Children always have larger ids than parents.
  std::uint64_t tape_id() const;

  // Copies the values into a fresh leaf that does not track gradients.
  Tensor detach() const;
  // Copies values and the requires_grad flag into a fresh leaf.
  Tensor clone() const;

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend struct detail::NodeAccess;
};

// Accumulates d(loss)/d(node) into every node reachable from loss.
// Throws NotScalar unless loss has exactly one element.
void backward(const Tensor& loss);

// True unless a NoGradGuard is alive on this thread.
bool grad_enabled();

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// ---- primitives ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& x, Shape shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
// x [n x p] + row [p], added to each of the n rows.
Tensor add_row(const Tensor& x, const Tensor& row);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
// x * s for a scalar tensor s; differentiable in both arguments.
Tensor scale_by(const Tensor& x, const Tensor& s);

// axis = -1 (last) or 0 (columns of a matrix).
Tensor softmax(const Tensor& x, int axis = -1);
Tensor log_softmax(const Tensor& x, int axis = -1);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-6);
Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
// Gradient passes only where lo <= x <= hi.
Tensor clamp(const Tensor& x, double lo, double hi);

// Gathers rows of table [V x d] into [ids.size() x d].
Tensor embedding(const Tensor& table, std::span<const int> ids);
// Rank-2 inputs join along axis 0 (rows) or 1 (columns); rank-1 inputs are
// joined end to end.
Tensor concat(std::span<const Tensor> parts, int axis);
Tensor concat(std::initializer_list<Tensor> parts, int axis);
// Half-open range [begin, end) along axis.
Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end);
// Row r of a matrix as a rank-1 tensor.
Tensor row(const Tensor& x, std::size_t r);
// Stacks equally sized vectors into a matrix.
Tensor stack_rows(std::span<const Tensor> rows);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// Divides every row by its Euclidean norm.
Tensor l2_normalize(const Tensor& x);
// Pairwise cosine similarity between rows of a [n x d] and rows of b [m x d].
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

}  // namespace ktir
