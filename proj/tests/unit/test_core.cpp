//
// dise - discrete diffusion structure elucidation
// SPDX-License-Identifier: Apache-2.0
//

#include <gtest/gtest.h>

#include <map>

#include "../oracles.hpp"

using namespace dise;

// --- common ------------------------------------------------------------------

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs = differs || x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, UniformAndIntRanges) {
  Rng r(7);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    const auto k = r.uniform_int(-3, 5);
    ASSERT_GE(k, -3);
    ASSERT_LE(k, 5);
  }
}

TEST(Rng, CategoricalFrequencies) {
  Rng r(11);
  const std::vector<double> w{0.5, 0.0, 0.3, 0.2};
  std::vector<double> freq(4, 0.0);
  const int draws = 200000;
  for (int i = 0; i < draws; ++i) freq[r.categorical(w)] += 1.0 / draws;
  EXPECT_EQ(freq[1], 0.0);
  EXPECT_LT(oracle::total_variation(freq, w), 0.005);
}

TEST(Rng, StreamSeedsAreDistinctAndOrderFree) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t m = 0; m < 4; ++m)
    for (std::uint64_t i = 0; i < 1000; ++i) seen.insert(stream_seed(m, i));
  EXPECT_EQ(seen.size(), 4000u);
  EXPECT_EQ(stream_seed(9, 17), stream_seed(9, 17));
}

TEST(Errors, HierarchyMapsToExitClasses) {
  EXPECT_THROW(throw FormulaMismatch("x"), DataError);
  EXPECT_THROW(throw ParseError(3, 4, "bad"), DataError);
  EXPECT_THROW(throw ChecksumMismatch("x"), ModelError);
  EXPECT_THROW(throw MissingModel("x"), ModelError);
  const ParseError p(3, 4, "bad");
  EXPECT_EQ(p.line(), 3u);
  EXPECT_EQ(p.column(), 4u);
}

// --- chem ----------------------------------------------------------------------

TEST(Chem, KindNamesRoundTrip) {
  for (const char *s : {"C", "O", "N", "CH0", "CH1", "CH2", "CH3", "OH0", "OH1", "NH0", "NH1",
                        "NH2"}) {
    const auto k = parse_atom_kind(s);
    ASSERT_TRUE(k) << s;
    EXPECT_EQ(k->name(), s);
  }
  EXPECT_FALSE(parse_atom_kind("X"));
  EXPECT_FALSE(parse_atom_kind("OH3"));
  EXPECT_FALSE(parse_atom_kind(""));
}

TEST(Chem, ExpectedValence) {
  EXPECT_EQ(AtomKind::super(Element::C, 3).expected_valence(), 1);
  EXPECT_EQ(AtomKind::super(Element::N, 1).expected_valence(), 2);
  EXPECT_EQ(AtomKind::plain(Element::O).expected_valence(), 2);
}

TEST(Chem, SuperAlphabetIsABijection) {
  std::set<int> idx;
  for (const char *s : {"CH0", "CH1", "CH2", "CH3", "OH0", "OH1", "NH0", "NH1", "NH2"})
    idx.insert(alphabet_index(AtomAlphabet::SuperAtom, *parse_atom_kind(s)));
  EXPECT_EQ(idx.size(), 9u);
  EXPECT_EQ(*idx.begin(), 0);
  EXPECT_EQ(*idx.rbegin(), alphabet_size(AtomAlphabet::SuperAtom) - 1);
  EXPECT_ANY_THROW(alphabet_index(AtomAlphabet::SuperAtom, AtomKind::super(Element::C, 4)));
}

TEST(Chem, BondOrders) {
  EXPECT_EQ(bond_order(BondClass::Aromatic), 1.5);
  EXPECT_EQ(bond_order(BondClass::SingleAromatic), 1.0);
  EXPECT_EQ(bond_order(BondClass::Triple), 3.0);
}

// --- edge tensor -------------------------------------------------------------

TEST(EdgeTensor, SetMirrorsAndUpperTriangleRoundTrips) {
  Rng r(1);
  for (int rep = 0; rep < 50; ++rep) {
    const auto e = oracle::random_edges(1 + rep % 8, r);
    EXPECT_TRUE(e.is_symmetric());
    for (std::size_t i = 0; i < e.size(); ++i) EXPECT_EQ(e(i, i), 0);
    EXPECT_EQ(EdgeTensor::from_upper_triangle(e.size(), e.upper_triangle()), e);
  }
}

TEST(EdgeTensor, PermutedRelabelsPairs) {
  Rng r(2);
  const auto e = oracle::random_edges(6, r);
  const auto p = oracle::random_permutation(6, r);
  const auto q = e.permuted(p);
  EXPECT_TRUE(q.is_symmetric());
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(q(p[i], p[j]), e(i, j));
  auto a = e.upper_triangle(), b = q.upper_triangle();
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);
  const auto kinds = std::vector<AtomKind>(6, AtomKind::super(Element::C, 0));
  EXPECT_TRUE(oracle::isomorphic(kinds, e, kinds, q));
}

// --- molgraph ------------------------------------------------------------------

TEST(MolGraph, ConstructionChecksShapes) {
  std::vector<Node> nodes(3, Node{AtomKind::super(Element::C, 2)});
  EXPECT_THROW(MolGraph(nodes, EdgeTensor(2)), InvariantViolation);
  CosyMask cosy(3);
  cosy.set(0, 1, 2);
  EXPECT_THROW(MolGraph(nodes, EdgeTensor(3), cosy), InvariantViolation);
  EdgeTensor bad(3);
  bad.set(0, 1, 7);
  EXPECT_THROW(MolGraph(nodes, bad), InvariantViolation);
  auto o = nodes;
  o[1].kind = AtomKind::super(Element::O, 1);
  CosyMask c2(3);
  c2.set(0, 1, 1);
  EXPECT_THROW(MolGraph(o, EdgeTensor(3), c2), InvariantViolation);
}

TEST(MolGraph, ValenceConservation) {
  Rng r(3);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 1 + rep % 9;
    const auto e = oracle::random_edges(n, r, {0.4, 0.2, 0.1, 0.1, 0.1, 0.1});
    const std::vector<AtomKind> kinds(n, AtomKind::super(Element::C, 1));
    const auto vc = compute_valence_charge(e, kinds);
    double lhs = 0.0, rhs = 0.0;
    for (const auto &v : vc) lhs += v.valence;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) rhs += bond_order(e(i, j));
    EXPECT_EQ(lhs, 2.0 * rhs);
  }
}

TEST(MolGraph, LaplacianMatchesJacobiAndComponents) {
  Rng r(4);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 1 + rep % 10;
    const auto e = oracle::random_edges(n, r, {0.7, 0.3});
    const auto spec = laplacian_spectrum(e);
    const auto ref = oracle::jacobi_eigenvalues(oracle::skeleton_laplacian(e));
    ASSERT_EQ(spec.eigenvalues.size(), static_cast<Eigen::Index>(n));
    int zeros = 0;
    for (std::size_t k = 0; k < n; ++k) {
      EXPECT_NEAR(spec.eigenvalues(k), ref[k], 1e-9);
      EXPECT_GE(spec.eigenvalues(k), -1e-9);
      if (k > 0) { EXPECT_LE(spec.eigenvalues(k - 1), spec.eigenvalues(k)); }
      zeros += std::abs(spec.eigenvalues(k)) < 1e-9;
    }
    EXPECT_EQ(zeros, oracle::union_find_components(e));
    EXPECT_EQ(count_components(e), oracle::union_find_components(e));
    // orthonormal eigenvectors
    const Eigen::MatrixXd gram = spec.eigenvectors.transpose() * spec.eigenvectors;
    EXPECT_TRUE(gram.isApprox(Eigen::MatrixXd::Identity(n, n), 1e-9));
  }
}

TEST(MolGraph, EigenvectorsAreSignFixed) {
  Rng r(5);
  for (int rep = 0; rep < 50; ++rep) {
    const auto e = oracle::random_edges(7, r, {0.6, 0.4});
    const auto spec = laplacian_spectrum(e);
    for (Eigen::Index c = 0; c < spec.eigenvectors.cols(); ++c) {
      Eigen::Index arg = 0;
      for (Eigen::Index i = 1; i < spec.eigenvectors.rows(); ++i)
        if (std::abs(spec.eigenvectors(i, c)) > std::abs(spec.eigenvectors(arg, c)) + 1e-12)
          arg = i;
      EXPECT_GT(spec.eigenvectors(arg, c), 0.0);
    }
  }
}

TEST(MolGraph, SimpleCyclesMatchExhaustiveWalks) {
  Rng r(6);
  for (int rep = 0; rep < 150; ++rep) {
    const std::size_t n = 3 + rep % 8;
    const auto e = oracle::random_edges(n, r, {0.55, 0.45});
    const auto ref = oracle::cycle_counts(e, n);
    std::vector<int> got(n + 1, 0);
    for (const auto &c : enumerate_simple_cycles(e, n)) {
      ASSERT_GE(c.size(), 3u);
      EXPECT_EQ(c.front(), *std::min_element(c.begin(), c.end()));
      ++got[c.size()];
    }
    EXPECT_EQ(got, ref) << "n=" << n;
  }
}

TEST(MolGraph, StructuralFeaturesOfBenzeneAndCyclopentane) {
  auto benzene = oracle::mol("CH1 CH1 CH1 CH1 CH1 CH1",
                             {{0, 1, 4}, {1, 2, 4}, {2, 3, 4}, {3, 4, 4}, {4, 5, 4}, {5, 0, 4}});
  auto f = compute_structural_features(benzene.edges(), benzene.kinds());
  EXPECT_EQ(f.global.cycle_counts, (std::array<int, 4>{0, 0, 0, 1}));
  EXPECT_EQ(f.global.n_components, 1);
  for (const auto &node : f.nodes) {
    EXPECT_EQ(node.valence, 3.0);
    EXPECT_EQ(node.charge, 0.0);
    EXPECT_EQ(node.ring_membership, (std::array<int, 3>{0, 0, 0}));
    EXPECT_EQ(node.in_largest_component, 1);
  }
  // C6 ring spectrum: 2 - 2cos(2 pi k / 6) = 1, 1, 3, 3, 4
  EXPECT_NEAR(f.global.lap_eigvals[0], 1.0, 1e-12);
  EXPECT_NEAR(f.global.lap_eigvals[2], 3.0, 1e-12);
  EXPECT_NEAR(f.global.lap_eigvals[4], 4.0, 1e-12);

  auto cp = oracle::mol("CH2 CH2 CH2 CH2 CH2 CH3",
                        {{0, 1, 1}, {1, 2, 1}, {2, 3, 1}, {3, 4, 1}, {4, 0, 1}});
  f = compute_structural_features(cp.edges(), cp.kinds());
  EXPECT_EQ(f.global.cycle_counts[2], 1);
  EXPECT_EQ(f.global.n_components, 2);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(f.nodes[i].ring_membership[2], 1);
  EXPECT_EQ(f.nodes[5].in_largest_component, 0);
  EXPECT_EQ(f.nodes[5].charge, 1.0);
  // two components: first nonzero eigenvalue of the 5-ring, padding with 0
  EXPECT_NEAR(f.global.lap_eigvals[0], 2.0 - 2.0 * std::cos(2.0 * std::numbers::pi / 5), 1e-12);
  EXPECT_EQ(f.global.lap_eigvals[4], 0.0);
}

TEST(MolGraph, StructuralFeaturesArePermutationEquivariant) {
  Rng r(8);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = 2 + rep % 8;
    const auto e = oracle::random_edges(n, r, {0.5, 0.3, 0.1, 0.1});
    const std::vector<AtomKind> kinds(n, AtomKind::super(Element::C, 1));
    const auto p = oracle::random_permutation(n, r);
    const auto ep = e.permuted(p);
    const auto a = compute_structural_features(e, kinds);
    const auto b = compute_structural_features(ep, kinds);
    EXPECT_EQ(a.global.cycle_counts, b.global.cycle_counts);
    EXPECT_EQ(a.global.n_components, b.global.n_components);
    for (int k = 0; k < 5; ++k) EXPECT_NEAR(a.global.lap_eigvals[k], b.global.lap_eigvals[k], 1e-9);
    for (std::size_t i = 0; i < n; ++i) {
      const auto &x = b.nodes[p[i]];
      const auto &y = a.nodes[i];
      EXPECT_EQ(x.ring_membership, y.ring_membership);
      EXPECT_EQ(x.valence, y.valence);
      EXPECT_EQ(x.in_largest_component, y.in_largest_component);
      for (int k = 0; k < 2; ++k) EXPECT_NEAR(x.spectral_weight[k], y.spectral_weight[k], 1e-9);
      for (std::size_t j = 0; j < n; ++j)
        EXPECT_NEAR(b.fiedler_projector(p[i], p[j]), a.fiedler_projector(i, j), 1e-9);
    }
  }
}

TEST(MolGraph, FiedlerProjectorIsAnOrthogonalProjection) {
  Rng r(9);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t n = 2 + rep % 8;
    const auto e = oracle::random_edges(n, r, {0.5, 0.5});
    const std::vector<AtomKind> kinds(n, AtomKind::super(Element::C, 1));
    const auto f = compute_structural_features(e, kinds);
    const auto &P = f.fiedler_projector;
    EXPECT_TRUE(P.isApprox(P.transpose(), 1e-12));
    if (P.isZero(0.0)) continue;  // no edges
    EXPECT_TRUE((P * P).isApprox(P, 1e-9));
    // trace = multiplicity of the lowest non-zero eigenvalue
    const auto ev = oracle::jacobi_eigenvalues(oracle::skeleton_laplacian(e));
    const std::size_t first = static_cast<std::size_t>(oracle::union_find_components(e));
    std::size_t mult = 0;
    for (std::size_t k = first; k < n; ++k) mult += std::abs(ev[k] - ev[first]) < 1e-6;
    EXPECT_NEAR(P.trace(), static_cast<double>(mult), 1e-9);
    double weights = 0.0;
    for (const auto &node : f.nodes) weights += node.spectral_weight[0];
    EXPECT_NEAR(weights, static_cast<double>(mult), 1e-9);
    // orthogonal to constant vectors on each component
    EXPECT_NEAR((P * Eigen::VectorXd::Ones(static_cast<Eigen::Index>(n))).norm(), 0.0, 1e-9);
  }
}

TEST(MolGraph, Validity) {
  auto ethanol = oracle::mol("CH3 CH2 OH1", {{0, 1, 1}, {1, 2, 1}});
  EXPECT_TRUE(is_valid_molecule(ethanol).valid);
  auto over = oracle::mol("CH3 CH3", {{0, 1, 2}});
  const auto rep = is_valid_molecule(over);
  EXPECT_FALSE(rep.valid);
  ASSERT_EQ(rep.violations.size(), 2u);
  EXPECT_EQ(rep.violations[0], "charge(0)=1");
  auto split = oracle::mol("CH4 CH4", {});
  EXPECT_FALSE(is_valid_molecule(split).valid);
  auto plain = oracle::mol("C O", {{0, 1, 2}});
  EXPECT_TRUE(is_valid_molecule(plain).valid);
  auto frac = oracle::mol("C C", {{0, 1, 4}});
  EXPECT_FALSE(is_valid_molecule(frac).valid);
}

TEST(MolGraph, ResolveImplicitHydrogens) {
  const auto kinds = oracle::kinds_of("CH3 CH2 O");
  EdgeTensor e(3);
  e.set(0, 1, 1);
  e.set(1, 2, 1);
  auto r = resolve_implicit_hydrogens(kinds, e, 6);
  ASSERT_TRUE(r);
  EXPECT_EQ((*r)[2], AtomKind::super(Element::O, 1));
  EXPECT_FALSE(resolve_implicit_hydrogens(kinds, e, 5));
  // lone oxygen: water is allowed to carry two hydrogens
  const auto water = oracle::kinds_of("O");
  auto w = resolve_implicit_hydrogens(water, EdgeTensor(1), 2);
  ASSERT_TRUE(w);
  EXPECT_EQ((*w)[0].hydrogens, 2);
}

TEST(MolGraph, FormulaOf) {
  const auto f = formula_of(oracle::kinds_of("CH3 CH2 OH1 NH2"));
  EXPECT_EQ(f.at(Element::C), 2);
  EXPECT_EQ(f.at(Element::H), 8);
  EXPECT_EQ(f.at(Element::O), 1);
  EXPECT_EQ(f.at(Element::N), 1);
  EXPECT_EQ(formula_string(f), "C2H8NO");
}

TEST(Canonical, KeyInvariantUnderPermutation) {
  Rng r(9);
  const char *pool[] = {"CH0", "CH1", "CH2", "CH3", "OH0", "NH1"};
  for (int rep = 0; rep < 300; ++rep) {
    const std::size_t n = 1 + rep % 9;
    std::vector<AtomKind> kinds;
    for (std::size_t i = 0; i < n; ++i) kinds.push_back(*parse_atom_kind(pool[r.uniform_int(0, 5)]));
    const auto e = oracle::random_edges(n, r, {0.5, 0.3, 0.1, 0.05, 0.05});
    const auto p = oracle::random_permutation(n, r);
    std::vector<AtomKind> kp(n);
    for (std::size_t i = 0; i < n; ++i) kp[p[i]] = kinds[i];
    EXPECT_EQ(canonical_key(kinds, e), canonical_key(kp, e.permuted(p)));
  }
}

TEST(Canonical, KeyEqualityIffIsomorphic) {
  // Highly symmetric, same-degree families stress refinement: random
  // regular-ish graphs with a single atom kind.
  Rng r(10);
  std::vector<std::pair<std::vector<AtomKind>, EdgeTensor>> corpus;
  for (int rep = 0; rep < 160; ++rep) {
    const std::size_t n = 4 + rep % 5;
    const std::vector<AtomKind> kinds(n, AtomKind::super(Element::C, rep % 2));
    corpus.emplace_back(kinds, oracle::random_edges(n, r, {0.5, 0.5}));
  }
  int iso_pairs = 0;
  for (std::size_t a = 0; a < corpus.size(); ++a)
    for (std::size_t b = a + 1; b < corpus.size(); ++b) {
      const auto &[ka, ea] = corpus[a];
      const auto &[kb, eb] = corpus[b];
      if (ka.size() != kb.size() || ka[0] != kb[0]) continue;
      const bool same = canonical_key(ka, ea) == canonical_key(kb, eb);
      const bool iso = oracle::isomorphic(ka, ea, kb, eb);
      iso_pairs += iso;
      EXPECT_EQ(same, iso) << a << " vs " << b;
    }
  EXPECT_GT(iso_pairs, 0);
}

TEST(Canonical, DistinguishesCospectralAndRegularGraphs) {
  // two 3-regular graphs on 6 vertices: K3,3 and the prism
  auto k33 = oracle::mol("CH1 CH1 CH1 CH1 CH1 CH1",
                         {{0, 3, 1}, {0, 4, 1}, {0, 5, 1}, {1, 3, 1}, {1, 4, 1}, {1, 5, 1},
                          {2, 3, 1}, {2, 4, 1}, {2, 5, 1}});
  auto prism = oracle::mol("CH1 CH1 CH1 CH1 CH1 CH1",
                           {{0, 1, 1}, {1, 2, 1}, {2, 0, 1}, {3, 4, 1}, {4, 5, 1}, {5, 3, 1},
                            {0, 3, 1}, {1, 4, 1}, {2, 5, 1}});
  EXPECT_NE(canonical_key(k33), canonical_key(prism));
  // two disjoint triangles vs a hexagon: both 2-regular
  auto tri2 = oracle::mol("CH2 CH2 CH2 CH2 CH2 CH2",
                          {{0, 1, 1}, {1, 2, 1}, {2, 0, 1}, {3, 4, 1}, {4, 5, 1}, {5, 3, 1}});
  auto hex = oracle::mol("CH2 CH2 CH2 CH2 CH2 CH2",
                         {{0, 1, 1}, {1, 2, 1}, {2, 3, 1}, {3, 4, 1}, {4, 5, 1}, {5, 0, 1}});
  EXPECT_NE(canonical_key(tri2), canonical_key(hex));
}

TEST(Canonical, IgnoresShiftsAndCosyButNotBondClass) {
  auto a = oracle::mol("CH3 CH2 OH1", {{0, 1, 1}, {1, 2, 1}});
  auto nodes = a.nodes();
  nodes[0].c_shift = 12.0;
  const auto b = a.with_nodes(nodes);
  EXPECT_EQ(canonical_key(a), canonical_key(b));
  auto c = oracle::mol("CH3 CH2 OH1", {{0, 1, 1}, {1, 2, 2}});
  EXPECT_NE(canonical_key(a), canonical_key(c));
  EXPECT_EQ(node_multiset_key(a.kinds()), "CH2.CH3.OH1");
}
