//
// dise - discrete diffusion structure elucidation
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dise/chem.hpp"
#include "dise/common.hpp"
#include "dise/molgraph.hpp"
#include "dise/spectra.hpp"

namespace dise {

// ---------------------------------------------------------------------------
// Random molecule growth

struct ElementWeights {
  double c = 0.7;
  double o = 0.15;
  double n = 0.15;
};

namespace detail {

// Mutable scratch molecule used while growing.
class GrowthState {
 public:
  explicit GrowthState(std::size_t cap) : bonds_(cap) {}

  std::size_t size() const noexcept { return atoms_.size(); }
  Element atom(std::size_t i) const { return atoms_[i]; }
  std::uint8_t bond(std::size_t i, std::size_t j) const { return bonds_(i, j); }

  double open(std::size_t i) const {
    double used = 0.0;
    for (std::size_t j = 0; j < atoms_.size(); ++j) used += bond_order(bonds_(i, j));
    return base_valence(atoms_[i]) - used;
  }

  std::size_t add_atom(Element e) {
    atoms_.push_back(e);
    return atoms_.size() - 1;
  }

  void set_bond(std::size_t i, std::size_t j, BondClass b) {
    bonds_.set(i, j, static_cast<std::uint8_t>(b));
  }

  // Graph distance, capped at `cap`.
  std::size_t distance(std::size_t a, std::size_t b, std::size_t cap) const {
    std::vector<std::size_t> dist(atoms_.size(), cap);
    std::vector<std::size_t> frontier{a};
    dist[a] = 0;
    while (!frontier.empty()) {
      std::vector<std::size_t> next;
      for (auto u : frontier)
        for (std::size_t v = 0; v < atoms_.size(); ++v)
          if (is_bond(bonds_(u, v)) && dist[v] == cap && dist[u] + 1 < cap) {
            dist[v] = dist[u] + 1;
            next.push_back(v);
          }
      frontier = std::move(next);
    }
    return dist[b];
  }

  bool in_aromatic_ring(std::size_t i) const {
    for (std::size_t j = 0; j < atoms_.size(); ++j)
      if (bonds_(i, j) == static_cast<std::uint8_t>(BondClass::Aromatic))
        return true;
    return false;
  }

  // Heavy-atom graph with hydrogens filling the open valences.
  MolGraph finish() const {
    const std::size_t n = atoms_.size();
    std::vector<Node> nodes(n);
    EdgeTensor e(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double o = open(i);
      nodes[i].kind = AtomKind::super(atoms_[i], static_cast<int>(o));
      for (std::size_t j = i + 1; j < n; ++j) e.set(i, j, bonds_(i, j));
    }
    return MolGraph(std::move(nodes), std::move(e));
  }

 private:
  std::vector<Element> atoms_;
  EdgeTensor bonds_;
};

inline Element draw_element(Rng &rng, const ElementWeights &w, bool ring) {
  const std::array<double, 3> weights{w.c, ring ? 0.0 : w.o, w.n};
  const double total = weights[0] + weights[1] + weights[2];
  if (total <= 0.0) return Element::C;
  switch (rng.categorical(weights)) {
    case 0: return Element::C;
    case 1: return Element::O;
    default: return Element::N;
  }
}

inline BondClass draw_order(Rng &rng, double max_order) {
  const double u = rng.uniform();
  int order = u < 0.75 ? 1 : (u < 0.93 ? 2 : 3);
  while (order > max_order) --order;
  return static_cast<BondClass>(order);
}

}  // namespace detail

// Stream of random valid molecules (possibly repeating). Each molecule grows
// from one atom (or one aromatic ring) by attaching atoms to open valences,
// closing rings and raising bond orders, up to a size drawn uniformly from
// [1, max_heavy_atoms].
class MoleculeGenerator {
 public:
  MoleculeGenerator(int max_heavy_atoms, ElementWeights weights,
                    std::uint64_t seed)
      : max_(max_heavy_atoms), weights_(weights), rng_(seed) {
    if (max_heavy_atoms < 1)
      throw InvariantViolation("max_heavy_atoms must be >= 1");
    if (weights.c < 0 || weights.o < 0 || weights.n < 0 ||
        weights.c + weights.o + weights.n <= 0)
      throw InvariantViolation("element weights must be >= 0 with positive sum");
  }

  MolGraph next() {
    for (;;) {
      auto g = attempt();
      if (is_valid_molecule(g).valid) return g;
    }
  }

 private:
  MolGraph attempt() {
    const auto target = static_cast<std::size_t>(rng_.uniform_int(1, max_));
    detail::GrowthState st(target);
    const bool ring_first = target >= 5 && rng_.uniform() < 0.2;
    if (ring_first) {
      const std::size_t r = target >= 6 && rng_.uniform() < 0.6 ? 6 : 5;
      add_aromatic_ring(st, r);
    } else {
      st.add_atom(detail::draw_element(rng_, weights_, false));
    }
    int stalls = 0;
    while (st.size() < target && stalls < 20) {
      const double u = rng_.uniform();
      bool moved = false;
      if (u < 0.7)
        moved = grow(st);
      else if (u < 0.85)
        moved = close_ring(st);
      else
        moved = upgrade(st);
      stalls = moved ? 0 : stalls + 1;
    }
    // a few decorations once the size is reached
    const auto extra = rng_.uniform_int(0, 2);
    for (std::int64_t i = 0; i < extra; ++i)
      (rng_.uniform() < 0.5 ? close_ring(st) : upgrade(st));
    return st.finish();
  }

  // Sites with at least one full unit of open valence.
  std::vector<std::size_t> open_sites(const detail::GrowthState &st) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < st.size(); ++i)
      if (st.open(i) >= 1.0) out.push_back(i);
    return out;
  }

  std::size_t pick(const std::vector<std::size_t> &v) {
    return v[static_cast<std::size_t>(
        rng_.uniform_int(0, static_cast<std::int64_t>(v.size()) - 1))];
  }

  bool grow(detail::GrowthState &st) {
    const auto sites = open_sites(st);
    if (sites.empty()) return false;
    const std::size_t site = pick(sites);
    const Element e = detail::draw_element(rng_, weights_, false);
    // a new atom needs at least one open valence left unless it is the last
    const double cap = std::min(st.open(site), static_cast<double>(base_valence(e)));
    const auto order = detail::draw_order(rng_, cap);
    const std::size_t a = st.add_atom(e);
    st.set_bond(site, a, order);
    return true;
  }

  bool close_ring(detail::GrowthState &st) {
    const auto sites = open_sites(st);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t x = 0; x < sites.size(); ++x)
      for (std::size_t y = x + 1; y < sites.size(); ++y) {
        const auto a = sites[x], b = sites[y];
        if (st.bond(a, b) != 0) continue;
        const auto d = st.distance(a, b, 8);
        if (d >= 2 && d < 8) pairs.emplace_back(a, b);
      }
    if (pairs.empty()) return false;
    const auto [a, b] = pairs[static_cast<std::size_t>(
        rng_.uniform_int(0, static_cast<std::int64_t>(pairs.size()) - 1))];
    st.set_bond(a, b, BondClass::Single);
    return true;
  }

  bool upgrade(detail::GrowthState &st) {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t a = 0; a < st.size(); ++a)
      for (std::size_t b = a + 1; b < st.size(); ++b) {
        const auto cls = st.bond(a, b);
        if (cls != 1 && cls != 2) continue;
        if (st.open(a) >= 1.0 && st.open(b) >= 1.0) pairs.emplace_back(a, b);
      }
    if (pairs.empty()) return false;
    const auto [a, b] = pairs[static_cast<std::size_t>(
        rng_.uniform_int(0, static_cast<std::int64_t>(pairs.size()) - 1))];
    st.set_bond(a, b, static_cast<BondClass>(st.bond(a, b) + 1));
    return true;
  }

  void add_aromatic_ring(detail::GrowthState &st, std::size_t r) {
    const std::size_t first = st.size();
    for (std::size_t i = 0; i < r; ++i)
      st.add_atom(detail::draw_element(rng_, weights_, true));
    for (std::size_t i = 0; i < r; ++i)
      st.set_bond(first + i, first + (i + 1) % r, BondClass::Aromatic);
  }

  int max_;
  ElementWeights weights_;
  Rng rng_;
};

// n_target distinct molecules (by canonical key), in generation order.
inline std::vector<MolGraph> generate_molecules(std::size_t n_target,
                                                int max_heavy_atoms,
                                                ElementWeights weights,
                                                std::uint64_t seed) {
  MoleculeGenerator gen(max_heavy_atoms, weights, seed);
  std::set<std::string> seen;
  std::vector<MolGraph> out;
  const std::size_t cap = 200 * std::max<std::size_t>(n_target, 10);
  for (std::size_t tries = 0; out.size() < n_target; ++tries) {
    if (tries >= cap)
      throw TargetUnreachable("only " + std::to_string(out.size()) + " of " +
                              std::to_string(n_target) +
                              " distinct molecules found");
    auto g = gen.next();
    if (seen.insert(canonical_key(g)).second) out.push_back(std::move(g));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Records

struct Provenance {
  std::uint64_t generator_seed = 0;
  std::string constants_version = "v1";

  friend bool operator==(const Provenance &, const Provenance &) = default;
};

struct DatasetRecord {
  std::string id;
  MolGraph graph;  // carries surrogate shifts in its nodes and the COSY mask
  SpectralRecord spectra;
  Provenance provenance;
};

inline bool operator==(const DatasetRecord &a, const DatasetRecord &b) {
  return a.id == b.id && a.provenance == b.provenance && a.spectra == b.spectra &&
         a.graph.nodes().size() == b.graph.nodes().size() &&
         std::equal(a.graph.nodes().begin(), a.graph.nodes().end(),
                    b.graph.nodes().begin(),
                    [](const Node &x, const Node &y) {
                      return x.kind == y.kind && x.c_shift == y.c_shift &&
                             x.h_shift == y.h_shift;
                    }) &&
         a.graph.edges() == b.graph.edges() && a.graph.cosy() == b.graph.cosy();
}

struct BuildResult {
  std::vector<DatasetRecord> records;
  std::size_t dropped = 0;  // molecules with shifts outside the ranges
};

inline DatasetRecord make_record(const MolGraph &mol, std::string id,
                                 std::uint64_t seed,
                                 const SurrogateConstants &k) {
  auto shifted = with_surrogate_shifts(mol, k);
  shifted = shifted.with_cosy(derive_cosy(shifted));
  DatasetRecord rec;
  rec.spectra = record_from_graph(shifted);
  rec.graph = std::move(shifted);
  rec.id = std::move(id);
  rec.provenance = {seed, k.version()};
  return rec;
}

// Attaches surrogate spectra; ids are "mol-<index>" over the input order.
inline BuildResult build_dataset(
    const std::vector<MolGraph> &mols, std::uint64_t seed = 0,
    const SurrogateConstants &k = SurrogateConstants::defaults()) {
  BuildResult out;
  for (std::size_t i = 0; i < mols.size(); ++i) {
    try {
      out.records.push_back(make_record(mols[i], "mol-" + std::to_string(i), seed, k));
    } catch (const ShiftOutOfRange &) {
      ++out.dropped;
    }
  }
  return out;
}

// Keeps generating until `n_records` molecules survive the range filter.
inline BuildResult generate_dataset(
    std::size_t n_records, int max_heavy_atoms, ElementWeights weights,
    std::uint64_t seed,
    const SurrogateConstants &k = SurrogateConstants::defaults()) {
  MoleculeGenerator gen(max_heavy_atoms, weights, seed);
  std::set<std::string> seen;
  BuildResult out;
  const std::size_t cap = 200 * std::max<std::size_t>(n_records, 10);
  for (std::size_t tries = 0; out.records.size() < n_records; ++tries) {
    if (tries >= cap)
      throw TargetUnreachable("only " + std::to_string(out.records.size()) +
                              " of " + std::to_string(n_records) +
                              " distinct molecules found");
    auto g = gen.next();
    if (!seen.insert(canonical_key(g)).second) continue;
    try {
      out.records.push_back(
          make_record(g, "mol-" + std::to_string(out.records.size()), seed, k));
    } catch (const ShiftOutOfRange &) {
      ++out.dropped;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitSpec {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
  std::uint64_t seed = 0;
};

struct Split {
  std::vector<DatasetRecord> train;
  std::vector<DatasetRecord> val;
  std::vector<DatasetRecord> test;
};

// Shuffles with the split seed and cuts at rounded fractions. Records must
// be unique by canonical key, which makes the parts key-disjoint.
inline Split split(const std::vector<DatasetRecord> &records, const SplitSpec &spec) {
  const double total = spec.train + spec.val + spec.test;
  if (spec.train < 0 || spec.val < 0 || spec.test < 0 ||
      std::abs(total - 1.0) > 1e-9)
    throw InvariantViolation("split fractions must be >= 0 and sum to 1");
  std::set<std::string> keys;
  for (const auto &r : records)
    if (!keys.insert(canonical_key(r.graph)).second)
      throw InvariantViolation("records are not unique by canonical key");
  std::vector<std::size_t> order(records.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(spec.seed);
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(order[i - 1], order[j]);
  }
  const std::size_t n = records.size();
  const auto n_train = static_cast<std::size_t>(std::llround(spec.train * n));
  const auto n_val = std::min(n - n_train,
                              static_cast<std::size_t>(std::llround(spec.val * n)));
  Split out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto &r = records[order[i]];
    if (i < n_train)
      out.train.push_back(r);
    else if (i < n_train + n_val)
      out.val.push_back(r);
    else
      out.test.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Line-delimited JSON
//
//   #dise-dataset v1 constants=<version>
//   {"id":..,"formula":{..},"nodes":[[kind,c,h],..],"edges":[..],
//    "cosy":[[i,j],..],"provenance":{"seed":..,"constants":..}}

inline constexpr std::string_view kDatasetHeader = "#dise-dataset v1";

inline nlohmann::ordered_json record_to_json(const DatasetRecord &r) {
  nlohmann::ordered_json j;
  j["id"] = r.id;
  nlohmann::ordered_json formula = nlohmann::ordered_json::object();
  for (const auto &[e, count] : r.spectra.formula)
    formula[std::string(element_symbol(e))] = count;
  j["formula"] = formula;
  auto nodes = nlohmann::ordered_json::array();
  for (const auto &node : r.graph.nodes())
    nodes.push_back({node.kind.name(), node.c_shift, node.h_shift});
  j["nodes"] = nodes;
  j["edges"] = r.graph.edges().upper_triangle();
  auto cosy = nlohmann::ordered_json::array();
  const auto &mask = r.graph.cosy();
  for (std::size_t a = 0; a < mask.size(); ++a)
    for (std::size_t b = a + 1; b < mask.size(); ++b)
      if (mask(a, b)) cosy.push_back({a, b});
  j["cosy"] = cosy;
  j["provenance"] = {{"seed", r.provenance.generator_seed},
                     {"constants", r.provenance.constants_version}};
  return j;
}

namespace detail {

// Column (1-based) where `key` appears in `line`, or 1.
inline std::size_t column_of(const std::string &line, const std::string &key) {
  const auto pos = line.find("\"" + key + "\"");
  return pos == std::string::npos ? 1 : pos + 1;
}

}  // namespace detail

inline DatasetRecord record_from_json(const std::string &line, std::size_t lineno) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error &e) {
    throw ParseError(lineno, e.byte == 0 ? 1 : e.byte, "malformed JSON");
  }
  std::string id = "?";
  auto fail = [&](const std::string &key, const std::string &why) -> void {
    throw ParseError(lineno, detail::column_of(line, key),
                     "record " + id + ": " + why);
  };
  try {
    if (!j.is_object()) throw ParseError(lineno, 1, "record is not an object");
    for (const char *key : {"id", "formula", "nodes", "edges", "cosy", "provenance"})
      if (!j.contains(key)) fail(key, std::string("missing field '") + key + "'");
    id = j.at("id").get<std::string>();

    std::vector<Node> nodes;
    for (const auto &jn : j.at("nodes")) {
      if (!jn.is_array() || jn.size() != 3) fail("nodes", "node entry must be [kind, c, h]");
      const auto kind = parse_atom_kind(jn.at(0).get<std::string>());
      if (!kind) fail("nodes", "unknown atom kind " + jn.at(0).get<std::string>());
      nodes.push_back({*kind, jn.at(1).get<double>(), jn.at(2).get<double>()});
    }
    const std::size_t n = nodes.size();
    const auto upper = j.at("edges").get<std::vector<int>>();
    if (upper.size() != n * (n - (n > 0 ? 1 : 0)) / 2)
      fail("edges", "edge list has " + std::to_string(upper.size()) +
                        " entries, expected " + std::to_string(n * (n - 1) / 2));
    std::vector<std::uint8_t> classes;
    for (int c : upper) {
      if (c < 0 || c >= kMaxBondClasses) fail("edges", "bond class out of range");
      classes.push_back(static_cast<std::uint8_t>(c));
    }
    CosyMask cosy(n);
    for (const auto &pair : j.at("cosy")) {
      const auto a = pair.at(0).get<std::size_t>();
      const auto b = pair.at(1).get<std::size_t>();
      if (a >= n || b >= n || a == b) fail("cosy", "COSY pair out of range");
      cosy.set(a, b, 1);
    }
    DatasetRecord rec;
    rec.id = id;
    rec.graph = MolGraph(std::move(nodes), EdgeTensor::from_upper_triangle(n, classes),
                         std::move(cosy));
    rec.spectra = record_from_graph(rec.graph);

    Formula formula;
    for (const auto &[sym, count] : j.at("formula").items()) {
      const auto e = parse_element(sym);
      if (!e) fail("formula", "unknown element " + sym);
      formula[*e] = count.get<int>();
    }
    if (formula != rec.spectra.formula)
      fail("formula", "formula disagrees with the node list");
    const auto &prov = j.at("provenance");
    rec.provenance.generator_seed = prov.at("seed").get<std::uint64_t>();
    rec.provenance.constants_version = prov.at("constants").get<std::string>();
    return rec;
  } catch (const nlohmann::json::exception &e) {
    throw ParseError(lineno, 1, "record " + id + ": " + e.what());
  } catch (const ParseError &) {
    throw;
  } catch (const DataError &e) {
    throw ParseError(lineno, 1, "record " + id + ": " + e.what());
  } catch (const InvariantViolation &e) {
    throw ParseError(lineno, 1, "record " + id + ": " + e.what());
  }
}

inline void write_records(std::ostream &os, const std::vector<DatasetRecord> &records,
                          const std::string &constants_version = "v1") {
  os << kDatasetHeader << " constants=" << constants_version << '\n';
  for (const auto &r : records) os << record_to_json(r).dump() << '\n';
}

inline std::vector<DatasetRecord> read_records(std::istream &is) {
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(is, line)) throw ParseError(1, 1, "empty dataset file");
  ++lineno;
  if (line.rfind(kDatasetHeader, 0) != 0)
    throw ParseError(1, 1, "missing '#dise-dataset v1' header");
  std::vector<DatasetRecord> out;
  std::set<std::string> ids;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto rec = record_from_json(line, lineno);
    if (!ids.insert(rec.id).second)
      throw DuplicateId("duplicate record id '" + rec.id + "' at line " +
                        std::to_string(lineno));
    out.push_back(std::move(rec));
  }
  return out;
}

inline void save_records(const std::string &path,
                         const std::vector<DatasetRecord> &records) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path);
  write_records(os, records,
                records.empty() ? "v1" : records.front().provenance.constants_version);
}

inline std::vector<DatasetRecord> load_records(const std::string &path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path);
  return read_records(is);
}

}  // namespace dise
