#pragma once

// Dense row-major double matrices, the deterministic RNG, and the small
// numeric kernels (softmax, entropy, gradient checking) shared by the model
// and attack code.

#include <array>
#include <cstdint>
#include <functional>
#include <string_view>
#include <utility>
#include <vector>

#include "poisonlab/errors.hpp"

namespace poisonlab {

using Vec = std::vector<double>;

struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;  // row-major, length rows*cols

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  // Pointer to the start of row r.
  double* row(std::size_t r) { return data.data() + r * cols; }
  const double* row(std::size_t r) const { return data.data() + r * cols; }
};

// Throw NumericError if any entry is non-finite.
void check_finite(const Vec& v, const char* where);
void check_finite(const Matrix& m, const char* where);

Matrix matmul(const Matrix& a, const Matrix& b);
// matmul(transpose(a), b) without materializing the transpose.
Matrix matmul_at_b(const Matrix& a, const Matrix& b);
// matmul(a, transpose(b)) without materializing the transpose.
Matrix matmul_a_bt(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& m);

double dot(const Vec& a, const Vec& b);
double l2_norm(const Vec& v);
double linf_norm(const Vec& v);

// FNV-1a over the raw bit patterns; used for frozen-weight checks and
// determinism assertions.
std::uint64_t bit_hash(const double* p, std::size_t n);
std::uint64_t bit_hash(const Vec& v);
std::uint64_t bit_hash(const Matrix& m);

std::uint64_t fnv1a64(std::string_view s);

// One splitmix64 step; advances state and returns the output.
std::uint64_t splitmix64(std::uint64_t& state);

// Deterministic seed derivation: distinct purpose strings give independent
// streams from one master seed.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view purpose);

// xoshiro256++ seeded via splitmix64. The integer stream is platform-exact;
// normal() uses the Marsaglia polar transform on top of it.
// Instances are single-owner: do not share across threads.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();
  double uniform();                          // [0, 1), 53-bit resolution
  double uniform(double lo, double hi);      // [lo, hi)
  double normal();                           // standard normal
  std::size_t uniform_index(std::size_t n);  // unbiased draw from [0, n)

  // Independent generator for a named sub-purpose of this seed.
  Rng derive(std::string_view purpose) const { return Rng(derive_seed(seed_, purpose)); }
  std::uint64_t seed() const { return seed_; }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[uniform_index(i)]);
    }
  }

 private:
  std::uint64_t seed_ = 0;
  std::array<std::uint64_t, 4> state_{};
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Numerically stable softmax (max-subtraction). Output sums to 1 within
// 1e-12. Throws NumericError on empty or non-finite input.
Vec softmax(const Vec& logits);

// Shannon entropy -sum p ln p with 0*ln(0) = 0. Input must be a
// distribution: entries >= 0, sum within 1e-9 of 1.
double entropy(const Vec& p);

// Max over coordinates of |fd - analytic| / max(1, |fd|, |analytic|) where
// fd is the central finite difference of loss_fn. eps must be in (0, 1e-3].
double grad_check(const std::function<double(const Vec&)>& loss_fn, const Vec& point,
                  const Vec& analytic_grad, double eps);

}  // namespace poisonlab
