#include "poisonlab/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>

namespace poisonlab {

void check_finite(const Vec& v, const char* where) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string(where) + ": non-finite value");
    }
  }
}

void check_finite(const Matrix& m, const char* where) {
  check_finite(m.data, where);
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw ShapeError("matmul: " + std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                     " * " + std::to_string(b.rows) + "x" + std::to_string(b.cols));
  }
  Matrix c(a.rows, b.cols, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.row(i);
    double* crow = c.row(i);
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = arow[k];
      if (aik == 0.0) continue;
      const double* brow = b.row(k);
      for (std::size_t j = 0; j < b.cols; ++j) {
        crow[j] += aik * brow[j];
      }
    }
  }
  check_finite(c, "matmul");
  return c;
}

Matrix matmul_at_b(const Matrix& a, const Matrix& b) {
  if (a.rows != b.rows) {
    throw ShapeError("matmul_at_b: inner dimensions " + std::to_string(a.rows) + " vs " +
                     std::to_string(b.rows));
  }
  Matrix c(a.cols, b.cols, 0.0);
  for (std::size_t k = 0; k < a.rows; ++k) {
    const double* arow = a.row(k);
    const double* brow = b.row(k);
    for (std::size_t i = 0; i < a.cols; ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      double* crow = c.row(i);
      for (std::size_t j = 0; j < b.cols; ++j) {
        crow[j] += aki * brow[j];
      }
    }
  }
  check_finite(c, "matmul_at_b");
  return c;
}

Matrix matmul_a_bt(const Matrix& a, const Matrix& b) {
  if (a.cols != b.cols) {
    throw ShapeError("matmul_a_bt: inner dimensions " + std::to_string(a.cols) + " vs " +
                     std::to_string(b.cols));
  }
  Matrix c(a.rows, b.rows, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.row(i);
    double* crow = c.row(i);
    for (std::size_t j = 0; j < b.rows; ++j) {
      const double* brow = b.row(j);
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols; ++k) {
        s += arow[k] * brow[k];
      }
      crow[j] = s;
    }
  }
  check_finite(c, "matmul_a_bt");
  return c;
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols, m.rows);
  for (std::size_t i = 0; i < m.rows; ++i) {
    for (std::size_t j = 0; j < m.cols; ++j) {
      t(j, i) = m(i, j);
    }
  }
  return t;
}

double dot(const Vec& a, const Vec& b) {
  if (a.size() != b.size()) {
    throw ShapeError("dot: size mismatch");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(const Vec& v) {
  return std::sqrt(dot(v, v));
}

double linf_norm(const Vec& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::fabs(x));
  return m;
}

std::uint64_t bit_hash(const double* p, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, &p[i], sizeof(bits));
    for (int b = 0; b < 8; ++b) {
      h ^= (bits >> (8 * b)) & 0xffULL;
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::uint64_t bit_hash(const Vec& v) { return bit_hash(v.data(), v.size()); }
std::uint64_t bit_hash(const Matrix& m) { return bit_hash(m.data.data(), m.size()); }

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose) {
  std::uint64_t state = seed ^ fnv1a64(purpose);
  std::uint64_t out = splitmix64(state);
  return splitmix64(state) ^ out;
}

namespace {
inline std::uint64_t rotl64(std::uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}
}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t sm = seed;
  for (auto& s : state_) s = splitmix64(sm);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = rotl64(state_[0] + state_[3], 23) + state_[0];
  const std::uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl64(state_[3], 45);
  return result;
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u, v, s;
  do {
    u = 2.0 * uniform() - 1.0;
    v = 2.0 * uniform() - 1.0;
    s = u * u + v * v;
  } while (s >= 1.0 || s == 0.0);
  const double mul = std::sqrt(-2.0 * std::log(s) / s);
  spare_ = v * mul;
  has_spare_ = true;
  return u * mul;
}

std::size_t Rng::uniform_index(std::size_t n) {
  if (n == 0) {
    throw NumericError("uniform_index: empty range");
  }
  const std::uint64_t bound = static_cast<std::uint64_t>(n);
  const std::uint64_t threshold = (0ULL - bound) % bound;  // 2^64 mod n
  std::uint64_t r;
  do {
    r = next_u64();
  } while (r < threshold);
  return static_cast<std::size_t>(r % bound);
}

Vec softmax(const Vec& logits) {
  if (logits.empty()) {
    throw NumericError("softmax: empty input");
  }
  check_finite(logits, "softmax");
  const double mx = *std::max_element(logits.begin(), logits.end());
  Vec out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return out;
}

double entropy(const Vec& p) {
  double sum = 0.0;
  for (double x : p) {
    if (x < 0.0) {
      throw DistributionError("entropy: negative probability");
    }
    sum += x;
  }
  if (std::fabs(sum - 1.0) > 1e-9) {
    throw DistributionError("entropy: probabilities sum to " + std::to_string(sum));
  }
  double h = 0.0;
  for (double x : p) {
    if (x > 0.0) h -= x * std::log(x);
  }
  return std::max(h, 0.0);
}

double grad_check(const std::function<double(const Vec&)>& loss_fn, const Vec& point,
                  const Vec& analytic_grad, double eps) {
  if (!(eps > 0.0) || eps > 1e-3) {
    throw NumericError("grad_check: eps must be in (0, 1e-3]");
  }
  if (point.size() != analytic_grad.size()) {
    throw ShapeError("grad_check: gradient size mismatch");
  }
  double worst = 0.0;
  Vec x = point;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + eps;
    const double fp = loss_fn(x);
    x[i] = orig - eps;
    const double fm = loss_fn(x);
    x[i] = orig;
    const double fd = (fp - fm) / (2.0 * eps);
    if (!std::isfinite(fd)) {
      throw NumericError("grad_check: non-finite finite difference");
    }
    const double denom = std::max({1.0, std::fabs(fd), std::fabs(analytic_grad[i])});
    worst = std::max(worst, std::fabs(fd - analytic_grad[i]) / denom);
  }
  return worst;
}

}  // namespace poisonlab
