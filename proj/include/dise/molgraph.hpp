//
// dise - discrete diffusion structure elucidation
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dise/chem.hpp"
#include "dise/common.hpp"
#include "dise/edge_tensor.hpp"

namespace dise {

// Heavy-atom node. Shifts are in ppm; 0 means "not observed".
struct Node {
  AtomKind kind;
  double c_shift = 0.0;
  double h_shift = 0.0;

  friend bool operator==(const Node &, const Node &) = default;
};

// G = (X, E, E_cosy): nodes with spectral annotations, symmetric bond-class
// tensor and COSY hint mask. Structural and global features are derived on
// demand from the edges (see compute_structural_features).
class MolGraph {
 public:
  MolGraph() = default;

  MolGraph(std::vector<Node> nodes, EdgeTensor edges, CosyMask cosy)
      : nodes_(std::move(nodes)), edges_(std::move(edges)),
        cosy_(std::move(cosy)) {
    validate();
  }

  MolGraph(std::vector<Node> nodes, EdgeTensor edges)
      : MolGraph(std::move(nodes), std::move(edges), CosyMask()) {}

  std::size_t size() const noexcept { return nodes_.size(); }
  const std::vector<Node> &nodes() const noexcept { return nodes_; }
  const EdgeTensor &edges() const noexcept { return edges_; }
  const CosyMask &cosy() const noexcept { return cosy_; }

  std::vector<AtomKind> kinds() const {
    std::vector<AtomKind> out;
    out.reserve(nodes_.size());
    for (const auto &n : nodes_) out.push_back(n.kind);
    return out;
  }

  MolGraph with_edges(EdgeTensor edges) const {
    return MolGraph(nodes_, std::move(edges), cosy_);
  }
  MolGraph with_nodes(std::vector<Node> nodes) const {
    return MolGraph(std::move(nodes), edges_, cosy_);
  }
  MolGraph with_cosy(CosyMask cosy) const {
    return MolGraph(nodes_, edges_, std::move(cosy));
  }

  // Relabel: node i moves to position perm[i].
  MolGraph permuted(const std::vector<std::size_t> &perm) const {
    std::vector<Node> nodes(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) nodes[perm[i]] = nodes_[i];
    return MolGraph(std::move(nodes), edges_.permuted(perm),
                    cosy_.permuted(perm));
  }

  friend bool operator==(const MolGraph &, const MolGraph &) = default;

 private:
  void validate() {
    const std::size_t n = nodes_.size();
    if (edges_.size() != n)
      throw InvariantViolation("edge tensor size does not match node count");
    if (cosy_.size() == 0 && n > 0) cosy_ = CosyMask(n);
    if (cosy_.size() != n)
      throw InvariantViolation("COSY mask size does not match node count");
    if (!edges_.is_symmetric() || !cosy_.is_symmetric())
      throw InvariantViolation("edge tensor or COSY mask is not symmetric");
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        if (edges_(i, j) >= kMaxBondClasses)
          throw InvariantViolation("bond class index out of range");
        if (cosy_(i, j) > 1)
          throw InvariantViolation("COSY mask must be binary");
        if (cosy_(i, j) && !(cosy_capable(nodes_[i].kind) &&
                             cosy_capable(nodes_[j].kind)))
          throw InvariantViolation(
              "COSY pair involves a node that is not a protonated carbon");
      }
    }
  }

  static bool cosy_capable(AtomKind k) {
    return k.element == Element::C && k.hydrogens != 0;
  }

  std::vector<Node> nodes_;
  EdgeTensor edges_;
  CosyMask cosy_;
};

// ---------------------------------------------------------------------------
// Connectivity

// Component id per node; ids are assigned in order of each component's
// smallest node index.
inline std::vector<int> component_ids(const EdgeTensor &e) {
  const std::size_t n = e.size();
  std::vector<int> id(n, -1);
  int next = 0;
  std::vector<std::size_t> stack;
  for (std::size_t s = 0; s < n; ++s) {
    if (id[s] >= 0) continue;
    id[s] = next;
    stack.assign(1, s);
    while (!stack.empty()) {
      const std::size_t u = stack.back();
      stack.pop_back();
      for (std::size_t v = 0; v < n; ++v)
        if (is_bond(e(u, v)) && id[v] < 0) {
          id[v] = next;
          stack.push_back(v);
        }
    }
    ++next;
  }
  return id;
}

inline int count_components(const EdgeTensor &e) {
  const auto id = component_ids(e);
  return id.empty() ? 0 : *std::max_element(id.begin(), id.end()) + 1;
}

// 1 for nodes of the largest component. Ties go to the component holding the
// smallest node index.
inline std::vector<int> largest_component_flags(const EdgeTensor &e) {
  const auto id = component_ids(e);
  if (id.empty()) return {};
  const int k = *std::max_element(id.begin(), id.end()) + 1;
  std::vector<int> sizes(k, 0);
  for (int c : id) ++sizes[c];
  // every component of maximal size is flagged, so ties stay
  // independent of node order
  const int best = *std::max_element(sizes.begin(), sizes.end());
  std::vector<int> flags(id.size());
  for (std::size_t i = 0; i < id.size(); ++i) flags[i] = sizes[id[i]] == best;
  return flags;
}

// ---------------------------------------------------------------------------
// Valence

struct ValenceCharge {
  double valence = 0.0;
  double charge = 0.0;
};

inline std::vector<ValenceCharge> compute_valence_charge(
    const EdgeTensor &e, std::span<const AtomKind> kinds) {
  const std::size_t n = e.size();
  std::vector<ValenceCharge> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    double v = 0.0;
    for (std::size_t j = 0; j < n; ++j) v += bond_order(e(i, j));
    out[i].valence = v;
    out[i].charge = kinds[i].expected_valence() - v;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cycles

// All simple cycles of length 3..max_len, each reported once as a vertex
// sequence starting at its smallest vertex, oriented so that the second
// vertex is smaller than the last.
inline std::vector<std::vector<std::size_t>> enumerate_simple_cycles(
    const EdgeTensor &e, std::size_t max_len) {
  const std::size_t n = e.size();
  std::vector<std::vector<std::size_t>> adj(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (is_bond(e(i, j))) adj[i].push_back(j);

  std::vector<std::vector<std::size_t>> cycles;
  std::vector<std::size_t> path;
  std::vector<char> on_path(n, 0);

  auto dfs = [&](auto &&self, std::size_t start, std::size_t u) -> void {
    for (std::size_t v : adj[u]) {
      if (v == start) {
        if (path.size() >= 3 && path[1] < path.back()) cycles.push_back(path);
        continue;
      }
      if (v < start || on_path[v] || path.size() >= max_len) continue;
      on_path[v] = 1;
      path.push_back(v);
      self(self, start, v);
      path.pop_back();
      on_path[v] = 0;
    }
  };

  for (std::size_t s = 0; s < n; ++s) {
    path.assign(1, s);
    on_path[s] = 1;
    dfs(dfs, s, s);
    on_path[s] = 0;
  }
  return cycles;
}

// ---------------------------------------------------------------------------
// Laplacian spectrum

struct LaplacianSpectrum {
  Eigen::VectorXd eigenvalues;   // ascending
  Eigen::MatrixXd eigenvectors;  // columns, canonicalized per eigenspace
};

namespace detail {

// Deterministic orthonormal basis of span(U): project the standard basis
// vectors e_0, e_1, ... in order and Gram-Schmidt the survivors. Each vector
// is then sign-fixed so its largest-magnitude entry (first on ties) is > 0.
inline Eigen::MatrixXd canonical_basis(const Eigen::MatrixXd &U) {
  const Eigen::Index n = U.rows();
  const Eigen::Index m = U.cols();
  Eigen::MatrixXd out(n, m);
  Eigen::Index found = 0;
  for (Eigen::Index k = 0; k < n && found < m; ++k) {
    Eigen::VectorXd v = U * U.row(k).transpose();
    for (Eigen::Index p = 0; p < found; ++p)
      v -= out.col(p).dot(v) * out.col(p);
    const double norm = v.norm();
    if (norm < 1e-6) continue;
    out.col(found++) = v / norm;
  }
  if (found < m) return U;  // numerically rank-deficient; keep solver basis
  for (Eigen::Index c = 0; c < m; ++c) {
    Eigen::Index arg = 0;
    for (Eigen::Index r = 1; r < n; ++r)
      if (std::abs(out(r, c)) > std::abs(out(arg, c)) + 1e-9) arg = r;
    if (out(arg, c) < 0) out.col(c) = -out.col(c);
  }
  return out;
}

}  // namespace detail

// Spectrum of L = D - A over the unweighted bond skeleton.
inline LaplacianSpectrum laplacian_spectrum(const EdgeTensor &e) {
  const Eigen::Index n = static_cast<Eigen::Index>(e.size());
  LaplacianSpectrum out;
  if (n == 0) return out;
  Eigen::MatrixXd L = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (i != j && is_bond(e(i, j))) {
        L(i, j) = -1.0;
        L(i, i) += 1.0;
      }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(L);
  out.eigenvalues = solver.eigenvalues();
  out.eigenvectors = solver.eigenvectors();
  constexpr double kDegenerate = 1e-6;
  Eigen::Index start = 0;
  while (start < n) {
    Eigen::Index end = start + 1;
    while (end < n &&
           out.eigenvalues(end) - out.eigenvalues(end - 1) < kDegenerate)
      ++end;
    out.eigenvectors.middleCols(start, end - start) =
        detail::canonical_basis(out.eigenvectors.middleCols(start, end - start));
    start = end;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structural features

struct NodeStructure {
  std::array<int, 3> ring_membership{};  // 3-, 4-, 5-membered rings
  int in_largest_component = 0;
  // diagonal of the projector onto the first two non-zero eigenspaces
  std::array<double, 2> spectral_weight{};
  double valence = 0.0;
  double charge = 0.0;
};

struct GlobalFeatures {
  std::array<int, 4> cycle_counts{};  // lengths 3..6
  int n_components = 0;
  std::array<double, 5> lap_eigvals{};
  double t_norm = 0.0;
};

struct StructuralFeatures {
  std::vector<NodeStructure> nodes;
  GlobalFeatures global;
  // projector onto the lowest non-zero eigenspace (Fiedler space); zero
  // when the skeleton has no edges
  Eigen::MatrixXd fiedler_projector;
};

// Everything derived from the current edge tensor. t_norm is left at 0 for
// the caller to fill.
inline StructuralFeatures compute_structural_features(
    const EdgeTensor &e, std::span<const AtomKind> kinds) {
  const std::size_t n = e.size();
  StructuralFeatures out;
  out.nodes.resize(n);
  if (n == 0) return out;

  for (const auto &cycle : enumerate_simple_cycles(e, 6)) {
    const std::size_t len = cycle.size();
    ++out.global.cycle_counts[len - 3];
    if (len <= 5)
      for (std::size_t v : cycle) ++out.nodes[v].ring_membership[len - 3];
  }

  const auto flags = largest_component_flags(e);
  const int n_comp = count_components(e);
  out.global.n_components = n_comp;

  const auto spectrum = laplacian_spectrum(e);
  const Eigen::Index first_nonzero = n_comp;
  const Eigen::Index total = static_cast<Eigen::Index>(n);
  for (Eigen::Index k = 0; k < 5 && first_nonzero + k < total; ++k)
    out.global.lap_eigvals[k] = spectrum.eigenvalues(first_nonzero + k);

  // Eigenvectors themselves depend on sign and basis choices that no rule
  // can make permutation-equivariant on symmetric graphs; projectors onto
  // whole eigenspaces do not.
  out.fiedler_projector = Eigen::MatrixXd::Zero(total, total);
  Eigen::Index start = first_nonzero;
  for (int space = 0; space < 2 && start < total; ++space) {
    Eigen::Index end = start + 1;
    while (end < total &&
           spectrum.eigenvalues(end) - spectrum.eigenvalues(end - 1) < 1e-6)
      ++end;
    const auto U = spectrum.eigenvectors.middleCols(start, end - start);
    for (std::size_t i = 0; i < n; ++i)
      out.nodes[i].spectral_weight[space] =
          U.row(static_cast<Eigen::Index>(i)).squaredNorm();
    if (space == 0) out.fiedler_projector = U * U.transpose();
    start = end;
  }

  const auto vc = compute_valence_charge(e, kinds);
  for (std::size_t i = 0; i < n; ++i) {
    auto &node = out.nodes[i];
    node.in_largest_component = flags[i];
    node.valence = vc[i].valence;
    node.charge = vc[i].charge;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Validity

struct ValidityReport {
  bool valid = true;
  std::vector<std::string> violations;
};

namespace detail {

inline std::string format_number(double v) {
  if (v == std::floor(v)) return std::to_string(static_cast<long long>(v));
  std::string s = std::to_string(v);
  while (!s.empty() && s.back() == '0') s.pop_back();
  return s;
}

}  // namespace detail

// Charge 0 on every super-atom and one connected component. A plain node
// (unobserved hydrogens) only needs a non-negative integral remainder for
// its implicit hydrogens.
inline ValidityReport is_valid_molecule(const MolGraph &g) {
  ValidityReport report;
  const auto kinds = g.kinds();
  const auto vc = compute_valence_charge(g.edges(), kinds);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double q = vc[i].charge;
    const bool ok = kinds[i].known_hydrogens()
                        ? q == 0.0
                        : (q >= 0.0 && q == std::floor(q));
    if (!ok) {
      report.valid = false;
      report.violations.push_back("charge(" + std::to_string(i) +
                                  ")=" + detail::format_number(-q));
    }
  }
  const int comps = count_components(g.edges());
  if (g.size() > 0 && comps != 1) {
    report.valid = false;
    report.violations.push_back("n_components=" + std::to_string(comps));
  }
  return report;
}

// Turns plain nodes into super-atoms using their remaining valence as the
// implicit hydrogen count. Fails when a remainder is fractional, negative or
// beyond what the element can carry, or when the hydrogen total disagrees
// with `formula_hydrogens`.
inline std::optional<std::vector<AtomKind>> resolve_implicit_hydrogens(
    std::span<const AtomKind> kinds, const EdgeTensor &e,
    int formula_hydrogens) {
  const auto vc = compute_valence_charge(e, kinds);
  std::vector<AtomKind> out(kinds.begin(), kinds.end());
  int total = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i].known_hydrogens()) {
      total += out[i].hydrogens;
      continue;
    }
    const double r = vc[i].charge;
    if (r < 0 || r != std::floor(r)) return std::nullopt;
    const int h = static_cast<int>(r);
    const int cap = out.size() > 1 ? max_bonded_hydrogens(out[i].element)
                                   : base_valence(out[i].element);
    if (h > cap) return std::nullopt;
    out[i] = AtomKind::super(out[i].element, h);
    total += h;
  }
  if (total != formula_hydrogens) return std::nullopt;
  return out;
}

inline Formula formula_of(std::span<const AtomKind> kinds) {
  Formula f;
  for (AtomKind k : kinds) {
    ++f[k.element];
    if (k.known_hydrogens()) f[Element::H] += k.hydrogens;
  }
  f.try_emplace(Element::H, 0);
  return f;
}

// ---------------------------------------------------------------------------
// Canonical form

namespace detail {

class Canonicalizer {
 public:
  Canonicalizer(std::span<const AtomKind> kinds, const EdgeTensor &e)
      : n_(kinds.size()), edges_(e), adj_(n_) {
    std::vector<std::string> names;
    for (AtomKind k : kinds) names.push_back(k.name());
    labels_ = names;
    std::vector<std::string> sorted = names;
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    initial_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i)
      initial_[i] = static_cast<int>(
          std::lower_bound(sorted.begin(), sorted.end(), names[i]) -
          sorted.begin());
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = 0; j < n_; ++j)
        if (is_bond(e(i, j))) adj_[i].emplace_back(j, e(i, j));
  }

  std::string run() {
    if (n_ == 0) return "0|";
    best_.reset();
    search(initial_);
    return *best_;
  }

 private:
  using Colors = std::vector<int>;

  Colors refine(Colors colors) const {
    using Signature = std::pair<int, std::vector<std::pair<int, int>>>;
    std::size_t distinct = count_distinct(colors);
    while (true) {
      std::vector<Signature> sigs(n_);
      for (std::size_t v = 0; v < n_; ++v) {
        sigs[v].first = colors[v];
        for (auto [u, cls] : adj_[v])
          sigs[v].second.emplace_back(cls, colors[u]);
        std::sort(sigs[v].second.begin(), sigs[v].second.end());
      }
      std::vector<Signature> sorted = sigs;
      std::sort(sorted.begin(), sorted.end());
      sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
      Colors next(n_);
      for (std::size_t v = 0; v < n_; ++v)
        next[v] = static_cast<int>(
            std::lower_bound(sorted.begin(), sorted.end(), sigs[v]) -
            sorted.begin());
      colors = std::move(next);
      if (sorted.size() == distinct) return colors;
      distinct = sorted.size();
    }
  }

  static std::size_t count_distinct(Colors c) {
    std::sort(c.begin(), c.end());
    return static_cast<std::size_t>(std::unique(c.begin(), c.end()) - c.begin());
  }

  // u and v are interchangeable when swapping them is an automorphism.
  bool twins(std::size_t u, std::size_t v) const {
    for (std::size_t w = 0; w < n_; ++w) {
      if (w == u || w == v) continue;
      if (edges_(u, w) != edges_(v, w)) return false;
    }
    return true;
  }

  void search(const Colors &start) {
    const Colors colors = refine(start);
    if (count_distinct(colors) == n_) {
      std::string key = build_key(colors);
      if (!best_ || key < *best_) best_ = std::move(key);
      return;
    }
    // target cell: non-singleton cell with the smallest color
    std::vector<int> cell_size(n_, 0);
    for (int c : colors) ++cell_size[c];
    int target = -1;
    for (std::size_t c = 0; c < n_; ++c)
      if (cell_size[c] > 1) {
        target = static_cast<int>(c);
        break;
      }
    std::vector<std::size_t> explored;
    for (std::size_t v = 0; v < n_; ++v) {
      if (colors[v] != target) continue;
      bool redundant = false;
      for (std::size_t u : explored)
        if (twins(u, v)) {
          redundant = true;
          break;
        }
      if (redundant) continue;
      explored.push_back(v);
      Colors next(n_);
      for (std::size_t u = 0; u < n_; ++u)
        next[u] = 2 * colors[u] + (u == v ? 0 : 1);
      search(next);
    }
  }

  std::string build_key(const Colors &colors) const {
    std::vector<std::size_t> order(n_);  // position -> node
    for (std::size_t v = 0; v < n_; ++v)
      order[static_cast<std::size_t>(colors[v])] = v;
    std::string key = std::to_string(n_) + "|";
    for (std::size_t p = 0; p < n_; ++p) {
      if (p) key += '.';
      key += labels_[order[p]];
    }
    key += '|';
    bool first = true;
    for (std::size_t p = 0; p < n_; ++p)
      for (std::size_t q = p + 1; q < n_; ++q) {
        const auto cls = edges_(order[p], order[q]);
        if (!cls) continue;
        if (!first) key += ',';
        first = false;
        key += std::to_string(p) + '-' + std::to_string(q) + ':' +
               std::to_string(cls);
      }
    return key;
  }

  std::size_t n_;
  const EdgeTensor &edges_;
  std::vector<std::vector<std::pair<std::size_t, int>>> adj_;
  std::vector<std::string> labels_;
  Colors initial_;
  std::optional<std::string> best_;
};

}  // namespace detail

// Isomorphism-invariant key over (atom kind, bond class) labels. Shifts and
// COSY are ignored.
inline std::string canonical_key(std::span<const AtomKind> kinds,
                                 const EdgeTensor &e) {
  return detail::Canonicalizer(kinds, e).run();
}

inline std::string canonical_key(const MolGraph &g) {
  const auto kinds = g.kinds();
  return canonical_key(kinds, g.edges());
}

// Sorted multiset of node kinds, e.g. "CH2.CH3.OH1".
inline std::string node_multiset_key(std::span<const AtomKind> kinds) {
  std::vector<std::string> names;
  for (AtomKind k : kinds) names.push_back(k.name());
  std::sort(names.begin(), names.end());
  std::string s;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (i) s += '.';
    s += names[i];
  }
  return s;
}

}  // namespace dise
