#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace m2dclap {

// Everything is computed in double precision; float32 appears only at I/O
// boundaries (WAV samples, exported tables).
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// Base class for recoverable errors raised by this library. The message is
// meant to be shown to a CLI user as-is.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

// Seeded generator with platform-stable draws. std::mt19937_64 output is fully
// specified by the standard; the std:: distributions are not, so the
// conversions to uniform/normal/integer live here.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : engine_(seed) {}

  // Derives an independent stream from a base seed and a list of stream keys
  // (epoch, step, sample index ...). Used so that every random decision in a
  // training run is a pure function of (seed, position).
  static Rng derive(uint64_t seed, std::initializer_list<uint64_t> keys);

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be > 0.
  uint64_t below(uint64_t n);

  // Uniform integer in [lo, hi] inclusive.
  int64_t range(int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(below(static_cast<uint64_t>(hi - lo) + 1));
  }

  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Normal truncated to [-2σ, 2σ] by rejection.
  double truncated_normal(double stddev);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// 64-bit FNV-1a.
uint64_t fnv1a64(std::string_view bytes, uint64_t basis = 0xcbf29ce484222325ULL);

// Row-wise l2 normalization helper used by cosine similarities. Throws Error
// when a row has zero norm.
Matrix l2_normalize_rows(const Matrix& x, const char* what);

}  // namespace m2dclap
