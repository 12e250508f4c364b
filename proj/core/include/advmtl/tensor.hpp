#pragma once

// Dense double-precision tensors with a dynamic reverse-mode tape.
//
// Every op records itself on the calling thread's active Tape when at least
// one input requires a gradient. backward() walks that tape in exact reverse
// recording order. Tensors are cheap shared handles; copying a Tensor aliases
// the same storage (use clone() for a deep copy).

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace advmtl {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when a forward op produces NaN or Inf, or a log/exp domain is violated.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

namespace detail {
struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized like value iff requires_grad
  bool requires_grad = false;
  bool leaf = true;
};
using NodePtr = std::shared_ptr<TensorNode>;
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  /// Row-major 2-D tensor.
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> values, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const;
  /// Direct write access, for optimizers and attacks. Never use on tape intermediates.
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t i) const { return values()[i]; }
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Deep copy as a fresh leaf.
  Tensor clone(bool requires_grad = false) const;

  const detail::NodePtr& node() const { return node_; }
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

 private:
  detail::NodePtr node_;
};

/// Ordered record of differentiable operations.
class Tape {
 public:
  struct Entry {
    std::vector<detail::NodePtr> inputs;
    detail::NodePtr output;
    std::function<void(const Entry&)> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return entries_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  void record(Entry entry);
  void clear() { entries_.clear(); }

  /// Propagates d(loss)/d(leaf) into every requires_grad leaf. Leaf grads
  /// accumulate across calls; intermediate grads are reset each call.
  void backward(const Tensor& loss);

  /// The tape ops on this thread record onto.
  static Tape& active();

  class Scope;

 private:
  std::vector<Entry> entries_;
};

/// Makes a fresh tape active for the lifetime of the scope.
class Tape::Scope {
 public:
  Scope();
  ~Scope();
  Scope(const Scope&) = delete;
  Scope& operator=(const Scope&) = delete;
  Tape& tape() { return tape_; }

 private:
  Tape tape_;
  Tape* previous_;
};

/// Disables recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Elementwise binary ops. `b` may match `a`, be a 1 x n row broadcast over the
// rows of an m x n `a`, or hold a single element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor neg(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);

/// Full reduction to a rank-0 scalar.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Reduction over one axis of a 2-D tensor, keeping the axis with size 1.
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a, std::size_t axis);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);
/// Half-open range [begin, end) along `axis` of a 2-D tensor.
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin,
             std::size_t end);
/// Gathers rows of `table` (n x d) into an ids.size() x d tensor.
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);

Tensor log_softmax(const Tensor& a, std::size_t axis);
Tensor logsumexp(const Tensor& a, std::size_t axis);
Tensor l2_norm(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

/// Backpropagates through the calling thread's active tape.
void backward(const Tensor& loss);
void zero_grad(std::span<Tensor> params);

/// Central-difference gradient of a scalar function, one coordinate at a time.
Tensor fd_gradient(const std::function<double(const Tensor&)>& f,
                   const Tensor& x, double h = 1e-5);

}  // namespace advmtl
