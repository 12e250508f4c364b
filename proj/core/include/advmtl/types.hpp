#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "advmtl/tensor.hpp"

namespace advmtl {

using WordId = int;
/// Sequence of word ids; never contains blank, sos or eos.
using Transcript = std::vector<WordId>;
using AccentLabel = int;

/// Plain row-major matrix of doubles, used for data that lives off the tape.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  Tensor to_tensor(bool requires_grad = false) const {
    return Tensor::matrix(rows, cols, data, requires_grad);
  }
  static Matrix from_tensor(const Tensor& t) {
    Matrix m(t.rows(), t.cols());
    m.data.assign(t.values().begin(), t.values().end());
    return m;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;
};

/// T x F input features; the attack's input space.
using FeatureSequence = Matrix;

double frobenius_norm(const Matrix& m);

}  // namespace advmtl
