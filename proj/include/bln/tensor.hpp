#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bln/error.hpp"

namespace bln {

using Shape = std::vector<std::size_t>;

inline constexpr std::size_t kMaxRank = 4;

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline void check_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must not be empty");
  if (shape.size() > kMaxRank)
    throw ShapeError("tensor rank " + std::to_string(shape.size()) +
                     " exceeds the maximum of 4");
  for (auto s : shape)
    if (s == 0) throw ShapeError("zero-sized dimension in " + shape_str(shape));
}

/// Deterministic counter-based generator (SplitMix64 over seed + counter).
/// Draw i depends only on (seed, stream, i), so sequences replay exactly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream) {}

  std::uint64_t next_u64() {
    std::uint64_t z = seed_ ^ mix(stream_ + 0x632BE59BD9B4E019ULL);
    z += (++counter_) * 0x9E3779B97F4A7C15ULL;
    return mix(z);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) {
    // Rejection sampling keeps the draw unbiased.
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return r % n;
  }

  /// Standard normal via Box-Muller; one value per pair of uniforms.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Independent stream derived from this generator's seed.
  [[nodiscard]] Rng fork(std::uint64_t stream) const {
    return Rng(seed_, mix(stream_ * 0xD1B54A32D192ED03ULL + stream + 1));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::uint64_t seed() const { return seed_; }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
};

/// Dense row-major array of doubles, rank 1 to 4.
class Tensor {
 public:
  Tensor() : shape_{1}, data_(1, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(shape_numel(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("buffer of " + std::to_string(data_.size()) +
                       " elements does not fit shape " + shape_str(shape_));
  }

  /// Rank-2 literal: Tensor::matrix({{1,2},{3,4}}).
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t m = rows.size();
    const std::size_t n = m ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(m * n);
    for (const auto& r : rows) {
      if (r.size() != n) throw ShapeError("ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({m, n}, std::move(data));
  }

  static Tensor vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  /// Leading dimension and product of the rest, the (m, d) view used by
  /// the normalizers.
  std::size_t rows() const { return shape_[0]; }
  std::size_t row_size() const { return data_.size() / shape_[0]; }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline Tensor zeros(const Shape& shape) { return Tensor(shape, 0.0); }
inline Tensor ones(const Shape& shape) { return Tensor(shape, 1.0); }

inline Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0) {
  Tensor t(shape);
  for (auto& v : t.data()) v = stddev * rng.normal();
  return t;
}

inline Tensor reshape(const Tensor& x, const Shape& shape) {
  check_shape(shape);
  if (shape_numel(shape) != x.size())
    throw ShapeError("cannot reshape " + shape_str(x.shape()) + " to " +
                     shape_str(shape));
  return Tensor(shape, x.values());
}

/// View any tensor as (rows, row_size).
inline Tensor flatten2d(const Tensor& x) { return reshape(x, {x.rows(), x.row_size()}); }

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor c({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a.at(i, p);
      for (std::size_t j = 0; j < n; ++j) c.at(i, j) += aip * b.at(p, j);
    }
  return c;
}

inline Tensor transpose2d(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose2d needs a rank-2 tensor");
  Tensor t({x.dim(1), x.dim(0)});
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t j = 0; j < x.dim(1); ++j) t.at(j, i) = x.at(i, j);
  return t;
}

/// Mean along one axis; the axis is removed from the shape (a rank-1
/// input reduces to shape [1]).
inline Tensor reduce_mean(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank())
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i)
    if (i != axis) out_shape.push_back(x.dim(i));
  if (out_shape.empty()) out_shape = {1};
  Tensor out(out_shape);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t i = 0; i < inner; ++i)
        out[o * inner + i] += x[(o * n + r) * inner + i];
  for (auto& v : out.data()) v /= static_cast<double>(n);
  return out;
}

template <typename F>
Tensor map(const Tensor& x, F&& f) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return out;
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, F&& f, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + " shape mismatch: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return zip(a, b, std::plus<>(), "add");
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return zip(a, b, std::minus<>(), "sub");
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return zip(a, b, std::multiplies<>(), "mul");
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return zip(
      a, b,
      [](double p, double q) {
        if (q == 0.0) throw Error("division by exact zero");
        return p / q;
      },
      "div");
}
inline Tensor scale(const Tensor& x, double s) {
  return map(x, [s](double v) { return v * s; });
}

inline double sum(const Tensor& x) {
  return std::accumulate(x.data().begin(), x.data().end(), 0.0);
}

/// Rows [begin, end) along the leading axis.
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  if (begin >= end || end > x.rows()) throw ShapeError("bad row slice");
  Shape shape = x.shape();
  shape[0] = end - begin;
  const std::size_t stride = x.row_size();
  std::vector<double> data(x.data().begin() + static_cast<std::ptrdiff_t>(begin * stride),
                           x.data().begin() + static_cast<std::ptrdiff_t>(end * stride));
  return Tensor(std::move(shape), std::move(data));
}

/// Gather rows by index along the leading axis.
inline Tensor take_rows(const Tensor& x, std::span<const std::size_t> idx) {
  if (idx.empty()) throw ShapeError("take_rows needs at least one index");
  Shape shape = x.shape();
  shape[0] = idx.size();
  const std::size_t stride = x.row_size();
  std::vector<double> data;
  data.reserve(idx.size() * stride);
  for (auto r : idx) {
    if (r >= x.rows()) throw ShapeError("row index out of range");
    auto first = x.data().begin() + static_cast<std::ptrdiff_t>(r * stride);
    data.insert(data.end(), first, first + static_cast<std::ptrdiff_t>(stride));
  }
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace bln
