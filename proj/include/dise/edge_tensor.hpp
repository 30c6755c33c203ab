//
// dise - discrete diffusion structure elucidation
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "dise/chem.hpp"
#include "dise/common.hpp"

namespace dise {

// Symmetric n x n field of small class indices with a zero diagonal.
// Writes go through set(), which mirrors (i, j) onto (j, i), so symmetry
// holds after every mutation.
class PairMatrix {
 public:
  PairMatrix() = default;
  explicit PairMatrix(std::size_t n) : n_(n), cells_(n * n, 0) {}

  std::size_t size() const noexcept { return n_; }
  std::size_t pair_count() const noexcept { return n_ * (n_ - (n_ > 0)) / 2; }

  std::uint8_t operator()(std::size_t i, std::size_t j) const noexcept {
    return cells_[i * n_ + j];
  }

  void set(std::size_t i, std::size_t j, std::uint8_t value) {
    if (i == j) {
      if (value != 0) throw InvariantViolation("diagonal entries must stay 0");
      return;
    }
    cells_[i * n_ + j] = value;
    cells_[j * n_ + i] = value;
  }

  // Row-major upper-triangle values (i < j), n(n-1)/2 entries.
  std::vector<std::uint8_t> upper_triangle() const {
    std::vector<std::uint8_t> out;
    out.reserve(pair_count());
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = i + 1; j < n_; ++j) out.push_back((*this)(i, j));
    return out;
  }

  static PairMatrix from_upper_triangle(std::size_t n,
                                        const std::vector<std::uint8_t> &v) {
    PairMatrix m(n);
    if (v.size() != m.pair_count())
      throw InvariantViolation("upper-triangle length does not match n");
    std::size_t k = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) m.set(i, j, v[k++]);
    return m;
  }

  // Relabel nodes: result(perm[i], perm[j]) = this(i, j).
  PairMatrix permuted(const std::vector<std::size_t> &perm) const {
    PairMatrix out(n_);
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = i + 1; j < n_; ++j)
        out.set(perm[i], perm[j], (*this)(i, j));
    return out;
  }

  bool is_symmetric() const noexcept {
    for (std::size_t i = 0; i < n_; ++i) {
      if (cells_[i * n_ + i] != 0) return false;
      for (std::size_t j = i + 1; j < n_; ++j)
        if (cells_[i * n_ + j] != cells_[j * n_ + i]) return false;
    }
    return true;
  }

  const std::vector<std::uint8_t> &cells() const noexcept { return cells_; }

  friend bool operator==(const PairMatrix &, const PairMatrix &) = default;

 private:
  std::size_t n_ = 0;
  std::vector<std::uint8_t> cells_;
};

// Bond classes per atom pair.
using EdgeTensor = PairMatrix;
// Binary COSY hint channel.
using CosyMask = PairMatrix;

inline bool is_bond(std::uint8_t cls) noexcept { return cls != 0; }

}  // namespace dise
