#include "advmtl/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace advmtl {

using detail::NodePtr;
using detail::TensorNode;

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

namespace {

thread_local Tape* t_active_tape = nullptr;
thread_local bool t_grad_enabled = true;

Tape& default_tape() {
  thread_local Tape tape;
  return tape;
}

NodePtr make_node(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel(shape) != values.size()) {
    throw ShapeError("tensor shape " + to_string(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad.assign(node->value.size(), 0.0);
  return node;
}

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite result in ") + op);
    }
  }
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + " expects a 2-D tensor, got " +
                     to_string(t.shape()));
  }
}

// Builds the output node and, if any input needs a gradient, records the
// backward rule on the active tape.
Tensor finish(const char* op, Shape shape, std::vector<double> values,
              std::initializer_list<const Tensor*> inputs,
              std::function<void(const Tape::Entry&)> backward_fn) {
  check_finite(values, op);
  bool needs = false;
  if (t_grad_enabled) {
    for (const Tensor* in : inputs) needs = needs || in->requires_grad();
  }
  NodePtr out = make_node(std::move(shape), std::move(values), needs);
  if (needs) {
    out->leaf = false;
    Tape::Entry e;
    e.inputs.reserve(inputs.size());
    for (const Tensor* in : inputs) e.inputs.push_back(in->node());
    e.output = out;
    e.backward = std::move(backward_fn);
    Tape::active().record(std::move(e));
  }
  return Tensor(out);
}

Tensor finish_many(const char* op, Shape shape, std::vector<double> values,
                   std::span<const Tensor> inputs,
                   std::function<void(const Tape::Entry&)> backward_fn) {
  check_finite(values, op);
  bool needs = false;
  if (t_grad_enabled) {
    for (const Tensor& in : inputs) needs = needs || in.requires_grad();
  }
  NodePtr out = make_node(std::move(shape), std::move(values), needs);
  if (needs) {
    out->leaf = false;
    Tape::Entry e;
    e.inputs.reserve(inputs.size());
    for (const Tensor& in : inputs) e.inputs.push_back(in.node());
    e.output = out;
    e.backward = std::move(backward_fn);
    Tape::active().record(std::move(e));
  }
  return Tensor(out);
}

enum class Broadcast { kSame, kRow, kScalar };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (b.numel() == 1) return Broadcast::kScalar;
  if (a.rank() == 2 && b.rank() == 2 && b.rows() == 1 &&
      b.cols() == a.cols()) {
    return Broadcast::kRow;
  }
  throw ShapeError(std::string(op) + ": cannot broadcast " +
                   to_string(b.shape()) + " onto " + to_string(a.shape()));
}

std::size_t b_index(Broadcast kind, std::size_t i, std::size_t cols) {
  switch (kind) {
    case Broadcast::kSame:
      return i;
    case Broadcast::kRow:
      return i % cols;
    case Broadcast::kScalar:
      return 0;
  }
  return 0;
}

template <typename Fwd, typename DA, typename DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, Fwd fwd,
              DA da, DB db) {
  const Broadcast kind = broadcast_kind(a, b, op);
  const std::size_t n = a.numel();
  const std::size_t cols = a.rank() == 2 ? a.cols() : n;
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[b_index(kind, i, cols)]);
  return finish(op, a.shape(), std::move(out), {&a, &b},
                [kind, cols, da, db](const Tape::Entry& e) {
                  TensorNode& x = *e.inputs[0];
                  TensorNode& y = *e.inputs[1];
                  const auto& g = e.output->grad;
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    const std::size_t j = b_index(kind, i, cols);
                    if (x.requires_grad) x.grad[i] += g[i] * da(x.value[i], y.value[j]);
                    if (y.requires_grad) y.grad[j] += g[i] * db(x.value[i], y.value[j]);
                  }
                });
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Deriv deriv) {
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return finish(op, a.shape(), std::move(out), {&a},
                [deriv](const Tape::Entry& e) {
                  TensorNode& x = *e.inputs[0];
                  const auto& g = e.output->grad;
                  const auto& y = e.output->value;
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    x.grad[i] += g[i] * deriv(x.value[i], y[i]);
                  }
                });
}

}  // namespace

// --- Tensor -----------------------------------------------------------------

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  check_finite(values, "Tensor::from");
  return Tensor(make_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = advmtl::numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({}, {value}, requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols,
                      std::vector<double> values, bool requires_grad) {
  return from({rows, cols}, std::move(values), requires_grad);
}

const Shape& Tensor::shape() const {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return node_->shape;
}

std::size_t Tensor::numel() const { return values().size(); }

std::size_t Tensor::rows() const {
  require_rank2(*this, "rows()");
  return shape()[0];
}

std::size_t Tensor::cols() const {
  require_rank2(*this, "cols()");
  return shape()[1];
}

std::span<const double> Tensor::values() const {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return node_->value;
}

std::span<double> Tensor::mutable_values() {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() on tensor of shape " + to_string(shape()));
  }
  return node_->value[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return node_->value[r * cols() + c];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!node_->leaf) throw std::logic_error("requires_grad can only change on leaves");
  node_->requires_grad = on;
  if (on) {
    node_->grad.assign(node_->value.size(), 0.0);
  } else {
    node_->grad.clear();
  }
}

bool Tensor::is_leaf() const { return node_->leaf; }

std::span<const double> Tensor::grad() const {
  if (!requires_grad()) throw std::logic_error("tensor has no gradient");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!requires_grad()) throw std::logic_error("tensor has no gradient");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_ && node_->requires_grad) {
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }
}

Tensor Tensor::clone(bool requires_grad) const {
  return Tensor(make_node(shape(), node_->value, requires_grad));
}

// --- Tape -------------------------------------------------------------------

void Tape::record(Entry entry) { entries_.push_back(std::move(entry)); }

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " +
                     to_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  const NodePtr& root = loss.node();
  if (root->leaf) {
    root->grad[0] += 1.0;
    return;
  }
  for (auto& e : entries_) std::fill(e.output->grad.begin(), e.output->grad.end(), 0.0);
  root->grad[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    const auto& g = it->output->grad;
    if (std::all_of(g.begin(), g.end(), [](double v) { return v == 0.0; })) continue;
    it->backward(*it);
  }
}

Tape& Tape::active() {
  return t_active_tape ? *t_active_tape : default_tape();
}

Tape::Scope::Scope() : previous_(t_active_tape) { t_active_tape = &tape_; }
Tape::Scope::~Scope() { t_active_tape = previous_; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

void backward(const Tensor& loss) { Tape::active().backward(loss); }

void zero_grad(std::span<Tensor> params) {
  for (auto& p : params) p.zero_grad();
}

// --- Elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double factor) {
  return unary(
      "scale", a, [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor tanh(const Tensor& a) {
  return unary(
      "tanh", a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.values()) {
    if (!(v > 0.0)) throw NumericError("log of non-positive value");
  }
  return unary(
      "log", a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

// --- Linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ShapeError("matmul: " + to_string(a.shape()) + " x " +
                     to_string(b.shape()));
  }
  auto av = a.values();
  auto bv = b.values();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
    }
  }
  return finish("matmul", {m, n}, std::move(out), {&a, &b},
                [m, k, n](const Tape::Entry& e) {
                  TensorNode& x = *e.inputs[0];
                  TensorNode& y = *e.inputs[1];
                  const auto& g = e.output->grad;
                  if (x.requires_grad) {
                    // dX = G * Y^T
                    for (std::size_t i = 0; i < m; ++i) {
                      for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        const double* yrow = &y.value[p * n];
                        const double* grow = &g[i * n];
                        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * yrow[j];
                        x.grad[i * k + p] += acc;
                      }
                    }
                  }
                  if (y.requires_grad) {
                    // dY = X^T * G
                    for (std::size_t i = 0; i < m; ++i) {
                      for (std::size_t p = 0; p < k; ++p) {
                        const double xip = x.value[i * k + p];
                        if (xip == 0.0) continue;
                        double* yg = &y.grad[p * n];
                        const double* grow = &g[i * n];
                        for (std::size_t j = 0; j < n; ++j) yg[j] += xip * grow[j];
                      }
                    }
                  }
                });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  auto av = a.values();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return finish("transpose", {n, m}, std::move(out), {&a},
                [m, n](const Tape::Entry& e) {
                  TensorNode& x = *e.inputs[0];
                  const auto& g = e.output->grad;
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) x.grad[i * n + j] += g[j * m + i];
                });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (advmtl::numel(shape) != a.numel()) {
    throw ShapeError("reshape " + to_string(a.shape()) + " -> " + to_string(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return finish("reshape", std::move(shape), std::move(out), {&a},
                [](const Tape::Entry& e) {
                  TensorNode& x = *e.inputs[0];
                  const auto& g = e.output->grad;
                  for (std::size_t i = 0; i < g.size(); ++i) x.grad[i] += g[i];
                });
}

// --- Reductions -------------------------------------------------------------

Tensor sum(const Tensor& a) {
  auto av = a.values();
  const double s = std::accumulate(av.begin(), av.end(), 0.0);
  return finish("sum", {}, {s}, {&a}, [](const Tape::Entry& e) {
    TensorNode& x = *e.inputs[0];
    const double g = e.output->grad[0];
    for (double& v : x.grad) v += g;
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum(const Tensor& a, std::size_t axis) {
  require_rank2(a, "sum(axis)");
  if (axis > 1) throw ShapeError("sum: axis out of range");
  const std::size_t m = a.rows(), n = a.cols();
  auto av = a.values();
  Shape shape = axis == 0 ? Shape{1, n} : Shape{m, 1};
  std::vector<double> out(axis == 0 ? n : m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[axis == 0 ? j : i] += av[i * n + j];
  return finish("sum", std::move(shape), std::move(out), {&a},
                [m, n, axis](const Tape::Entry& e) {
                  TensorNode& x = *e.inputs[0];
                  const auto& g = e.output->grad;
                  for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                      x.grad[i * n + j] += g[axis == 0 ? j : i];
                });
}

Tensor mean(const Tensor& a, std::size_t axis) {
  require_rank2(a, "mean(axis)");
  if (axis > 1) throw ShapeError("mean: axis out of range");
  const std::size_t count = a.shape()[axis];
  if (count == 0) throw ShapeError("mean over empty axis");
  return scale(sum(a, axis), 1.0 / static_cast<double>(count));
}

Tensor l2_norm(const Tensor& a) {
  auto av = a.values();
  double ss = 0.0;
  for (double v : av) ss += v * v;
  const double norm = std::sqrt(ss);
  return finish("l2_norm", {}, {norm}, {&a}, [](const Tape::Entry& e) {
    TensorNode& x = *e.inputs[0];
    const double n = e.output->value[0];
    if (n == 0.0) return;  // subgradient 0 at the origin
    const double g = e.output->grad[0];
    for (std::size_t i = 0; i < x.value.size(); ++i) x.grad[i] += g * x.value[i] / n;
  });
}

// --- Structural -------------------------------------------------------------

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
  return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  if (axis > 1) throw ShapeError("concat: axis out of range");
  for (const auto& p : parts) require_rank2(p, "concat");
  const std::size_t fixed = parts[0].shape()[1 - axis];
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  offsets.reserve(parts.size());
  for (const auto& p : parts) {
    if (p.shape()[1 - axis] != fixed) {
      throw ShapeError("concat: mismatched " + to_string(p.shape()) + " vs " +
                       to_string(parts[0].shape()));
    }
    offsets.push_back(total);
    total += p.shape()[axis];
  }
  const std::size_t rows = axis == 0 ? total : fixed;
  const std::size_t cols = axis == 0 ? fixed : total;
  std::vector<double> out(rows * cols);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto pv = parts[k].values();
    const std::size_t pr = parts[k].rows(), pc = parts[k].cols();
    for (std::size_t i = 0; i < pr; ++i)
      for (std::size_t j = 0; j < pc; ++j) {
        const std::size_t r = axis == 0 ? i + offsets[k] : i;
        const std::size_t c = axis == 0 ? j : j + offsets[k];
        out[r * cols + c] = pv[i * pc + j];
      }
  }
  return finish_many("concat", {rows, cols}, std::move(out), parts,
                     [offsets, axis, cols](const Tape::Entry& e) {
                       const auto& g = e.output->grad;
                       for (std::size_t k = 0; k < e.inputs.size(); ++k) {
                         TensorNode& x = *e.inputs[k];
                         if (!x.requires_grad) continue;
                         const std::size_t pr = x.shape[0], pc = x.shape[1];
                         for (std::size_t i = 0; i < pr; ++i)
                           for (std::size_t j = 0; j < pc; ++j) {
                             const std::size_t r = axis == 0 ? i + offsets[k] : i;
                             const std::size_t c = axis == 0 ? j : j + offsets[k];
                             x.grad[i * pc + j] += g[r * cols + c];
                           }
                       }
                     });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin,
             std::size_t end) {
  require_rank2(a, "slice");
  if (axis > 1 || begin > end || end > a.shape()[axis]) {
    throw ShapeError("slice [" + std::to_string(begin) + "," +
                     std::to_string(end) + ") on axis " + std::to_string(axis) +
                     " of " + to_string(a.shape()));
  }
  const std::size_t m = a.rows(), n = a.cols();
  const std::size_t rows = axis == 0 ? end - begin : m;
  const std::size_t cols = axis == 0 ? n : end - begin;
  const std::size_t r0 = axis == 0 ? begin : 0;
  const std::size_t c0 = axis == 0 ? 0 : begin;
  auto av = a.values();
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = av[(i + r0) * n + j + c0];
  return finish("slice", {rows, cols}, std::move(out), {&a},
                [rows, cols, r0, c0, n](const Tape::Entry& e) {
                  TensorNode& x = *e.inputs[0];
                  const auto& g = e.output->grad;
                  for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t j = 0; j < cols; ++j)
                      x.grad[(i + r0) * n + j + c0] += g[i * cols + j];
                });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  require_rank2(table, "embedding_lookup");
  const std::size_t n = table.rows(), d = table.cols();
  std::vector<int> idx(ids.begin(), ids.end());
  for (int id : idx) {
    if (id < 0 || static_cast<std::size_t>(id) >= n) {
      throw ShapeError("embedding_lookup: id " + std::to_string(id) +
                       " outside table of " + std::to_string(n) + " rows");
    }
  }
  auto tv = table.values();
  std::vector<double> out(idx.size() * d);
  for (std::size_t r = 0; r < idx.size(); ++r)
    std::copy_n(&tv[static_cast<std::size_t>(idx[r]) * d], d, &out[r * d]);
  return finish("embedding_lookup", {idx.size(), d}, std::move(out), {&table},
                [idx, d](const Tape::Entry& e) {
                  TensorNode& x = *e.inputs[0];
                  const auto& g = e.output->grad;
                  for (std::size_t r = 0; r < idx.size(); ++r)
                    for (std::size_t j = 0; j < d; ++j)
                      x.grad[static_cast<std::size_t>(idx[r]) * d + j] += g[r * d + j];
                });
}

// --- Normalizers ------------------------------------------------------------

namespace {

// Visits each reduction line of a 2-D tensor: `count` lines of `len` elements
// at stride `stride`, starting at base(line).
struct Lines {
  std::size_t count, len, stride, line_stride;
  std::size_t base(std::size_t line) const { return line * line_stride; }
};

Lines lines_for(const Tensor& a, std::size_t axis) {
  const std::size_t m = a.rows(), n = a.cols();
  if (axis == 1) return {m, n, 1, n};
  return {n, m, n, 1};
}

}  // namespace

Tensor logsumexp(const Tensor& a, std::size_t axis) {
  require_rank2(a, "logsumexp");
  if (axis > 1) throw ShapeError("logsumexp: axis out of range");
  const Lines L = lines_for(a, axis);
  if (L.len == 0) throw ShapeError("logsumexp over empty axis");
  auto av = a.values();
  std::vector<double> out(L.count);
  for (std::size_t l = 0; l < L.count; ++l) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < L.len; ++k) mx = std::max(mx, av[L.base(l) + k * L.stride]);
    double s = 0.0;
    for (std::size_t k = 0; k < L.len; ++k) s += std::exp(av[L.base(l) + k * L.stride] - mx);
    out[l] = mx + std::log(s);
  }
  Shape shape = axis == 0 ? Shape{1, a.cols()} : Shape{a.rows(), 1};
  return finish("logsumexp", std::move(shape), std::move(out), {&a},
                [L](const Tape::Entry& e) {
                  TensorNode& x = *e.inputs[0];
                  const auto& g = e.output->grad;
                  const auto& y = e.output->value;
                  for (std::size_t l = 0; l < L.count; ++l) {
                    if (g[l] == 0.0) continue;
                    for (std::size_t k = 0; k < L.len; ++k) {
                      const std::size_t i = L.base(l) + k * L.stride;
                      x.grad[i] += g[l] * std::exp(x.value[i] - y[l]);
                    }
                  }
                });
}

Tensor log_softmax(const Tensor& a, std::size_t axis) {
  require_rank2(a, "log_softmax");
  if (axis > 1) throw ShapeError("log_softmax: axis out of range");
  const Lines L = lines_for(a, axis);
  if (L.len == 0) throw ShapeError("log_softmax over empty axis");
  auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t l = 0; l < L.count; ++l) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < L.len; ++k) mx = std::max(mx, av[L.base(l) + k * L.stride]);
    double s = 0.0;
    for (std::size_t k = 0; k < L.len; ++k) s += std::exp(av[L.base(l) + k * L.stride] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t k = 0; k < L.len; ++k) {
      const std::size_t i = L.base(l) + k * L.stride;
      out[i] = av[i] - lse;
    }
  }
  return finish("log_softmax", a.shape(), std::move(out), {&a},
                [L](const Tape::Entry& e) {
                  TensorNode& x = *e.inputs[0];
                  const auto& g = e.output->grad;
                  const auto& y = e.output->value;
                  for (std::size_t l = 0; l < L.count; ++l) {
                    double gs = 0.0;
                    for (std::size_t k = 0; k < L.len; ++k) gs += g[L.base(l) + k * L.stride];
                    for (std::size_t k = 0; k < L.len; ++k) {
                      const std::size_t i = L.base(l) + k * L.stride;
                      x.grad[i] += g[i] - std::exp(y[i]) * gs;
                    }
                  }
                });
}

// --- Finite differences -----------------------------------------------------

Tensor fd_gradient(const std::function<double(const Tensor&)>& f,
                   const Tensor& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("fd_gradient: h must be positive");
  NoGradGuard guard;
  Tensor probe = x.clone();
  auto pv = probe.mutable_values();
  std::vector<double> out(pv.size());
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double orig = pv[i];
    pv[i] = orig + h;
    const double up = f(probe);
    pv[i] = orig - h;
    const double down = f(probe);
    pv[i] = orig;
    out[i] = (up - down) / (2.0 * h);
  }
  return Tensor::from(x.shape(), std::move(out));
}

}  // namespace advmtl
