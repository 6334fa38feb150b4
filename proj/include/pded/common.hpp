// Shared infrastructure: error codes, deterministic RNG streams, and a
// small order-preserving parallel map. Every random draw in the library goes
// through Rng so a fixed seed reproduces a run bit-for-bit.
#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace pded {

using Arr = Eigen::ArrayXXd;
using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// ───────────────────────── errors ─────────────────────────

enum class Errc {
  UnknownSymbol,
  IncompleteExpression,
  TrailingTokens,
  InvalidDerivativeChild,
  InvalidTraversal,
  AllTermsEliminated,
  SingularSystem,
  EmptyBank,
  NonFiniteColumn,
  NonFiniteResidual,
  DimensionMismatch,
  UnsupportedVariable,
  DivergedLoss,
  SupportMismatch,
  UnstableSolve,
  TooManyRequested,
  ConfigError,
  IoError,
  Internal,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::UnknownSymbol:          return "UnknownSymbol";
    case Errc::IncompleteExpression:   return "IncompleteExpression";
    case Errc::TrailingTokens:         return "TrailingTokens";
    case Errc::InvalidDerivativeChild: return "InvalidDerivativeChild";
    case Errc::InvalidTraversal:       return "InvalidTraversal";
    case Errc::AllTermsEliminated:     return "AllTermsEliminated";
    case Errc::SingularSystem:         return "SingularSystem";
    case Errc::EmptyBank:              return "EmptyBank";
    case Errc::NonFiniteColumn:        return "NonFiniteColumn";
    case Errc::NonFiniteResidual:      return "NonFiniteResidual";
    case Errc::DimensionMismatch:      return "DimensionMismatch";
    case Errc::UnsupportedVariable:    return "UnsupportedVariable";
    case Errc::DivergedLoss:           return "DivergedLoss";
    case Errc::SupportMismatch:        return "SupportMismatch";
    case Errc::UnstableSolve:          return "UnstableSolve";
    case Errc::TooManyRequested:       return "TooManyRequested";
    case Errc::ConfigError:            return "ConfigError";
    case Errc::IoError:                return "IoError";
    case Errc::Internal:               return "Internal";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what),
        code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) fail(code, what);
}

// ───────────────────────── rng ─────────────────────────

inline std::uint64_t splitmix64(std::uint64_t& s) {
  s += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = s;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// xoshiro256** with explicit distribution transforms, so sequences do not
// depend on any standard-library implementation detail.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) {
    std::uint64_t s = seed;
    for (auto& w : state_) w = splitmix64(s);
  }

  std::uint64_t next() {
    auto rotl = [](std::uint64_t x, int k) {
      return (x << k) | (x >> (64 - k));
    };
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1).
  double uniform() { return double(next() >> 11) * 0x1.0p-53; }
  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  // Standard normal via Box-Muller; one fresh pair per call keeps the
  // stream position independent of call parity.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Uniform index in [0, n).
  std::size_t index(std::size_t n) {
    return n ? std::size_t(uniform() * double(n)) % n : 0;
  }

  // Derived independent stream; `tag` separates consumers.
  Rng child(std::uint64_t tag) {
    std::uint64_t s = next() ^ (tag * 0x9e3779b97f4a7c15ULL);
    return Rng(splitmix64(s));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i)
      std::swap(v[i - 1], v[index(i)]);
  }

 private:
  std::uint64_t state_[4];
};

// ───────────────────────── worker pool ─────────────────────────

// Thread cap: PDED_THREADS if set, else hardware concurrency.
inline unsigned thread_cap() {
  if (const char* e = std::getenv("PDED_THREADS")) {
    const long v = std::atol(e);
    if (v >= 1) return unsigned(v);
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc ? hc : 1u;
}

// Order-preserving parallel map: fn(i) writes only slot i of its output, so
// results are identical for any worker count.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                         unsigned workers = 0) {
  if (workers == 0) workers = thread_cap();
  if (workers <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  workers = std::min<std::size_t>(workers, n);
  std::vector<std::thread> ts;
  ts.reserve(workers);
  std::atomic<std::size_t> cursor{0};
  std::exception_ptr err;
  std::mutex err_mtx;
  for (unsigned w = 0; w < workers; ++w) {
    ts.emplace_back([&] {
      for (;;) {
        const std::size_t i = cursor.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mtx);
          if (!err) err = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : ts) t.join();
  if (err) std::rethrow_exception(err);
}

inline bool finite_all(const Arr& a) { return a.isFinite().all(); }

}  // namespace pded
