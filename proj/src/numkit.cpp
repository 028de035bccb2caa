#include "evsteer/numkit.hpp"

#include <bit>
#include <cmath>
#include <numbers>
#include <string>

namespace evsteer::numkit {

template <typename T>
bool BasicMat<T>::all_finite() const noexcept {
  for (T v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

template class BasicMat<float>;
template class BasicMat<double>;

template <typename T>
BasicMat<T> matmul(const BasicMat<T>& a, const BasicMat<T>& b) {
  if (a.cols() != b.rows()) {
    throw ValidationError("matmul dimension mismatch: " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                          " times " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
  BasicMat<T> c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const T aik = a(i, k);
      auto brow = b.row(k);
      for (std::size_t j = 0; j < out.size(); ++j) out[j] += aik * brow[j];
    }
  }
  return c;
}

template Mat matmul<float>(const Mat&, const Mat&);
template Mat64 matmul<double>(const Mat64&, const Mat64&);

namespace {

template <typename T>
std::vector<double> column_sums(const BasicMat<T>& m) {
  if (m.rows() == 0) throw ValidationError("mean_rows of a matrix with zero rows");
  std::vector<double> acc(m.cols(), 0.0);
  for (std::size_t t = 0; t < m.rows(); ++t) {
    auto r = m.row(t);
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += static_cast<double>(r[j]);
  }
  return acc;
}

}  // namespace

Vec mean_rows(const Mat& m) {
  auto acc = column_sums(m);
  const double n = static_cast<double>(m.rows());
  Vec out(acc.size());
  for (std::size_t j = 0; j < acc.size(); ++j) out[j] = static_cast<float>(acc[j] / n);
  return out;
}

Vec64 mean_rows(const Mat64& m) {
  auto acc = column_sums(m);
  const double n = static_cast<double>(m.rows());
  for (double& v : acc) v /= n;
  return acc;
}

Mat64 to_f64(const Mat& m) {
  std::vector<double> d(m.values().begin(), m.values().end());
  return Mat64(m.rows(), m.cols(), std::move(d));
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ValidationError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double cosine(std::span<const double> a, std::span<const double> b) {
  const double na = norm2(a);
  const double nb = norm2(b);
  if (na == 0.0 || nb == 0.0) throw ValidationError("cosine of a zero-norm vector");
  return dot(a, b) / (na * nb);
}

bool bitwise_equal(std::span<const float> a, std::span<const float> b) noexcept {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::bit_cast<std::uint32_t>(a[i]) != std::bit_cast<std::uint32_t>(b[i])) return false;
  }
  return true;
}

namespace {

constexpr unsigned __int128 make_u128(std::uint64_t hi, std::uint64_t lo) {
  return (static_cast<unsigned __int128>(hi) << 64) | lo;
}

constexpr unsigned __int128 kPcgMultiplier = make_u128(0x2360ED051FC65DA4ULL, 0x4385DF649FCCF645ULL);
constexpr unsigned __int128 kPcgIncrement = make_u128(0x5851F42D4C957F2DULL, 0x14057B7EF767814FULL);

}  // namespace

SeededRng::SeededRng(std::uint64_t seed) {
  state_ = 0;
  step();
  state_ += seed;
  step();
}

void SeededRng::step() noexcept { state_ = state_ * kPcgMultiplier + kPcgIncrement; }

std::uint64_t SeededRng::next_u64() noexcept {
  step();
  const auto hi = static_cast<std::uint64_t>(state_ >> 64);
  const auto lo = static_cast<std::uint64_t>(state_);
  const unsigned rot = static_cast<unsigned>(state_ >> 122);
  const std::uint64_t x = hi ^ lo;
  return (x >> rot) | (x << ((64U - rot) & 63U));
}

double SeededRng::uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double SeededRng::gaussian() noexcept {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  // u1 in (0, 1] keeps the log finite.
  const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::uint64_t SeededRng::below(std::uint64_t bound) noexcept {
  if (bound <= 1) return 0;
  const std::uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    const std::uint64_t x = next_u64();
    if (x >= threshold) return x % bound;
  }
}

Mat gaussian_matrix(SeededRng& rng, std::size_t rows, std::size_t cols, double scale) {
  if (!(scale > 0.0)) throw ValidationError("gaussian_matrix scale must be positive");
  Mat m(rows, cols);
  for (float& v : m.flat()) v = static_cast<float>(scale * rng.gaussian());
  return m;
}

}  // namespace evsteer::numkit
