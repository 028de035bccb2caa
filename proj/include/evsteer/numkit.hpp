#pragma once

// Dense row-major matrices, fixed-order reductions and a portable seeded RNG.
// Every kernel here accumulates in a declared order so results are
// bit-reproducible; nothing is fused or parallelised internally.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "evsteer/error.hpp"

namespace evsteer::numkit {

template <typename T>
class BasicMat {
 public:
  using value_type = T;

  BasicMat() = default;
  BasicMat(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, T{0}) {}
  BasicMat(std::size_t rows, std::size_t cols, std::vector<T> data) : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ValidationError("matrix data length " + std::to_string(data_.size()) + " != " +
                            std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  [[nodiscard]] static BasicMat identity(std::size_t n) {
    BasicMat m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
    return m;
  }

  [[nodiscard]] std::size_t rows() const noexcept { return rows_; }
  [[nodiscard]] std::size_t cols() const noexcept { return cols_; }
  [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }
  [[nodiscard]] bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  [[nodiscard]] std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  [[nodiscard]] std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  [[nodiscard]] std::span<T> flat() noexcept { return data_; }
  [[nodiscard]] std::span<const T> flat() const noexcept { return data_; }
  [[nodiscard]] const std::vector<T>& values() const noexcept { return data_; }

  [[nodiscard]] bool all_finite() const noexcept;

  friend bool operator==(const BasicMat&, const BasicMat&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Mat = BasicMat<float>;
using Mat64 = BasicMat<double>;
using Vec = std::vector<float>;
using Vec64 = std::vector<double>;

// c[i][j] = sum_k a[i][k] * b[k][j], k ascending.
template <typename T>
[[nodiscard]] BasicMat<T> matmul(const BasicMat<T>& a, const BasicMat<T>& b);

// Column means, accumulated in double over ascending row index.
[[nodiscard]] Vec mean_rows(const Mat& m);
[[nodiscard]] Vec64 mean_rows(const Mat64& m);

[[nodiscard]] Mat64 to_f64(const Mat& m);

// Small vector helpers used across the theory checks.
[[nodiscard]] double dot(std::span<const double> a, std::span<const double> b);
[[nodiscard]] double norm2(std::span<const double> a);
[[nodiscard]] double cosine(std::span<const double> a, std::span<const double> b);
[[nodiscard]] bool bitwise_equal(std::span<const float> a, std::span<const float> b) noexcept;

// PCG XSL-RR 128/64. Seeding follows the reference pcg64 srandom routine with
// the default stream, so a given seed yields the same stream everywhere.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed);

  std::uint64_t next_u64() noexcept;
  // 53-bit uniform in [0, 1).
  double uniform() noexcept;
  // Box-Muller. Each pair consumes two u64 draws (u1 first, then u2); the
  // cosine branch is returned first and the sine branch is cached for the
  // next call.
  double gaussian() noexcept;
  // Uniform integer in [0, bound) by rejection on the top bits.
  std::uint64_t below(std::uint64_t bound) noexcept;

 private:
  void step() noexcept;

  unsigned __int128 state_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Row-major draws of N(0, scale^2), computed in double and rounded to float.
[[nodiscard]] Mat gaussian_matrix(SeededRng& rng, std::size_t rows, std::size_t cols, double scale);

}  // namespace evsteer::numkit
