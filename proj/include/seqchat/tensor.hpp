#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace seqchat {

struct ShapeMismatch : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct IndexOutOfVocab : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Dense row-major 2-D matrix. The only numeric value type in the project.
template <class T>
class Matrix {
 public:
  using value_type = T;

  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, T fill = T{0})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::initializer_list<std::initializer_list<T>> init) {
    rows_ = init.size();
    cols_ = rows_ ? init.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& row : init) {
      if (row.size() != cols_) throw ShapeMismatch("ragged matrix initializer");
      data_.insert(data_.end(), row.begin(), row.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Matrix& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  template <class U>
  Matrix<U> cast() const {
    Matrix<U> out(rows_, cols_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

std::string shape_string(std::size_t rows, std::size_t cols);

template <class T>
void require_same_shape(const Matrix<T>& a, const Matrix<T>& b, const char* op) {
  if (!a.same_shape(b)) {
    throw ShapeMismatch(std::string(op) + ": " + shape_string(a.rows(), a.cols()) + " vs " +
                        shape_string(b.rows(), b.cols()));
  }
}

// ---- plain (untraced) kernels ------------------------------------------------

// a (n x k) * b (k x m)
template <class T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeMismatch("matmul: " + shape_string(a.rows(), a.cols()) + " * " +
                        shape_string(b.rows(), b.cols()));
  }
  Matrix<T> out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto orow = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      if (aik == T{0}) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < brow.size(); ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

// a (n x k) * b^T where b is (m x k)
template <class T>
Matrix<T> matmul_nt(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.cols() != b.cols()) {
    throw ShapeMismatch("matmul_nt: " + shape_string(a.rows(), a.cols()) + " * (" +
                        shape_string(b.rows(), b.cols()) + ")^T");
  }
  Matrix<T> out(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto arow = a.row(i);
    for (std::size_t j = 0; j < b.rows(); ++j) {
      auto brow = b.row(j);
      T acc{0};
      for (std::size_t k = 0; k < arow.size(); ++k) acc += arow[k] * brow[k];
      out(i, j) = acc;
    }
  }
  return out;
}

// a^T * b where a is (k x n), b is (k x m)
template <class T>
Matrix<T> matmul_tn(const Matrix<T>& a, const Matrix<T>& b) {
  if (a.rows() != b.rows()) {
    throw ShapeMismatch("matmul_tn: (" + shape_string(a.rows(), a.cols()) + ")^T * " +
                        shape_string(b.rows(), b.cols()));
  }
  Matrix<T> out(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto arow = a.row(k);
    auto brow = b.row(k);
    for (std::size_t i = 0; i < arow.size(); ++i) {
      const T aki = arow[i];
      if (aki == T{0}) continue;
      auto orow = out.row(i);
      for (std::size_t j = 0; j < brow.size(); ++j) orow[j] += aki * brow[j];
    }
  }
  return out;
}

template <class T, class F>
Matrix<T> map(const Matrix<T>& a, F&& fn) {
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = fn(a[i]);
  return out;
}

template <class T, class F>
Matrix<T> zip(const Matrix<T>& a, const Matrix<T>& b, const char* op, F&& fn) {
  require_same_shape(a, b, op);
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = fn(a[i], b[i]);
  return out;
}

template <class T>
T sigmoid(T x) {
  // Split on sign so exp never overflows.
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <class T>
Matrix<T> add(const Matrix<T>& a, const Matrix<T>& b) {
  return zip(a, b, "add", [](T x, T y) { return x + y; });
}
template <class T>
Matrix<T> sub(const Matrix<T>& a, const Matrix<T>& b) {
  return zip(a, b, "sub", [](T x, T y) { return x - y; });
}
template <class T>
Matrix<T> hadamard(const Matrix<T>& a, const Matrix<T>& b) {
  return zip(a, b, "hadamard", [](T x, T y) { return x * y; });
}
template <class T>
Matrix<T> tanh(const Matrix<T>& a) {
  return map(a, [](T x) { return std::tanh(x); });
}
template <class T>
Matrix<T> sigmoid(const Matrix<T>& a) {
  return map(a, [](T x) { return sigmoid(x); });
}
template <class T>
Matrix<T> scale(const Matrix<T>& a, T s) {
  return map(a, [s](T x) { return x * s; });
}
template <class T>
Matrix<T> add_const(const Matrix<T>& a, T c) {
  return map(a, [c](T x) { return x + c; });
}

template <class T>
Matrix<T> softmax_rows(const Matrix<T>& a) {
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto in = a.row(r);
    auto o = out.row(r);
    T mx = -std::numeric_limits<T>::infinity();
    for (T v : in) mx = std::max(mx, v);
    T total{0};
    for (std::size_t c = 0; c < in.size(); ++c) {
      o[c] = std::exp(in[c] - mx);
      total += o[c];
    }
    for (T& v : o) v /= total;
  }
  return out;
}

template <class T>
Matrix<T> log_softmax_rows(const Matrix<T>& a) {
  Matrix<T> out(a.rows(), a.cols());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    auto in = a.row(r);
    auto o = out.row(r);
    T mx = -std::numeric_limits<T>::infinity();
    for (T v : in) mx = std::max(mx, v);
    T total{0};
    for (T v : in) total += std::exp(v - mx);
    const T lse = mx + std::log(total);
    for (std::size_t c = 0; c < in.size(); ++c) o[c] = in[c] - lse;
  }
  return out;
}

template <class T>
bool all_finite(const Matrix<T>& a) {
  for (T v : a.data()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// Uniform in [-bound, bound). Uses its own mantissa extraction so the stream
// is identical across standard libraries.
template <class T>
Matrix<T> uniform_init(std::size_t rows, std::size_t cols, double bound, std::uint64_t seed) {
  if (rows == 0 || cols == 0) throw ShapeMismatch("uniform_init: zero dimension");
  std::mt19937_64 rng(seed);
  Matrix<T> out(rows, cols);
  for (auto& v : out.data()) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;  // [0, 1)
    v = static_cast<T>((2.0 * u - 1.0) * bound);
  }
  return out;
}

// Uniform in +-sqrt(6 / (rows + cols)).
template <class T>
Matrix<T> xavier_init(std::size_t rows, std::size_t cols, std::uint64_t seed) {
  if (rows == 0 || cols == 0) throw ShapeMismatch("xavier_init: zero dimension");
  return uniform_init<T>(rows, cols, std::sqrt(6.0 / static_cast<double>(rows + cols)), seed);
}

// Mean over unmasked rows of -log softmax(logits)[target]. mask[r] != 0 marks
// an ignored (padding) row. All rows masked gives 0.
template <class T>
T cross_entropy(const Matrix<T>& logits, std::span<const int> targets,
                std::span<const std::uint8_t> mask) {
  if (targets.size() != logits.rows() || mask.size() != logits.rows()) {
    throw ShapeMismatch("cross_entropy: target/mask length must equal logits rows");
  }
  const auto logp = log_softmax_rows(logits);
  T total{0};
  std::size_t count = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (mask[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= logits.cols()) {
      throw IndexOutOfVocab("cross_entropy: target id " + std::to_string(targets[r]) +
                            " outside vocabulary of " + std::to_string(logits.cols()));
    }
    total -= logp(r, static_cast<std::size_t>(targets[r]));
    ++count;
  }
  return count == 0 ? T{0} : total / static_cast<T>(count);
}

// ---- serialization -----------------------------------------------------------

// Header line "name rows cols\n" followed by rows*cols little-endian float32.
void write_tensor(std::ostream& out, const std::string& name, const Matrix<float>& m);

struct NamedTensor {
  std::string name;
  Matrix<float> value;
};

// Throws std::runtime_error on malformed or truncated input.
NamedTensor read_tensor(std::istream& in);

}  // namespace seqchat
