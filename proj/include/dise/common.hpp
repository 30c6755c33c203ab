//
// dise - discrete diffusion structure elucidation
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>

namespace dise {

// Error hierarchy. DataError and ModelError map onto the CLI exit codes
// (3 and 4 respectively).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class ModelError : public Error {
 public:
  using Error::Error;
};

#define DISE_DEFINE_ERROR(Name, Base)   \
  class Name : public Base {            \
   public:                              \
    using Base::Base;                   \
  };

DISE_DEFINE_ERROR(InvariantViolation, Error)
DISE_DEFINE_ERROR(FormulaMismatch, DataError)
DISE_DEFINE_ERROR(ShiftOutOfRange, DataError)
DISE_DEFINE_ERROR(TargetUnreachable, DataError)
DISE_DEFINE_ERROR(DuplicateId, DataError)
DISE_DEFINE_ERROR(MixedTarget, DataError)
DISE_DEFINE_ERROR(ShapeMismatch, ModelError)
DISE_DEFINE_ERROR(NonFiniteGradient, ModelError)
DISE_DEFINE_ERROR(DegenerateNormalizer, ModelError)
DISE_DEFINE_ERROR(MissingModel, ModelError)
DISE_DEFINE_ERROR(BadMagic, ModelError)
DISE_DEFINE_ERROR(VersionMismatch, ModelError)
DISE_DEFINE_ERROR(ChecksumMismatch, ModelError)
DISE_DEFINE_ERROR(TruncatedFile, ModelError)

#undef DISE_DEFINE_ERROR

class ParseError : public DataError {
 public:
  ParseError(std::size_t line, std::size_t column, const std::string &reason)
      : DataError("line " + std::to_string(line) + ", column " +
                  std::to_string(column) + ": " + reason),
        line_(line), column_(column), reason_(reason) {}

  std::size_t line() const noexcept { return line_; }
  std::size_t column() const noexcept { return column_; }
  const std::string &reason() const noexcept { return reason_; }

 private:
  std::size_t line_;
  std::size_t column_;
  std::string reason_;
};

// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Counter-based stream split: the seed of stream `index` under `master`.
// Streams are independent of the order in which they are requested.
constexpr std::uint64_t stream_seed(std::uint64_t master,
                                    std::uint64_t index) noexcept {
  return mix64(mix64(master) ^ mix64(index + 0x632be59bd9b4e019ULL));
}

// Thin wrapper over mt19937_64 with distribution code written out so that a
// given seed produces the same stream with every standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(mix64(seed)) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi] (inclusive), rejection sampled.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    if (hi <= lo) return lo;
    const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
    const std::uint64_t limit =
        std::numeric_limits<std::uint64_t>::max() -
        std::numeric_limits<std::uint64_t>::max() % range;
    std::uint64_t draw;
    do {
      draw = engine_();
    } while (draw >= limit);
    return lo + static_cast<std::int64_t>(draw % range);
  }

  // Index drawn from an unnormalized non-negative weight vector.
  std::size_t categorical(std::span<const double> weights) {
    double total = 0;
    for (double w : weights) total += w;
    double u = uniform() * total;
    std::size_t last_positive = 0;
    for (std::size_t k = 0; k < weights.size(); ++k) {
      const double w = weights[k];
      if (w <= 0) continue;
      last_positive = k;
      if (u < w) return k;
      u -= w;
    }
    return last_positive;
  }

 private:
  std::mt19937_64 engine_;
};

}  // namespace dise
