//
// dise - discrete diffusion structure elucidation
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "dise/chem.hpp"
#include "dise/common.hpp"
#include "dise/edge_tensor.hpp"
#include "dise/molgraph.hpp"

namespace dise {

inline constexpr double kMaxCarbonShift = 250.0;
inline constexpr double kMaxProtonShift = 15.0;

// ---------------------------------------------------------------------------
// Surrogate shift constants

// Additive shift model parameters. Stored as plain text:
//
//   #dise-surrogate-constants v1
//   base_c.CH3=10
//   inc_c.O.Single=40
//   ...
class SurrogateConstants {
 public:
  static constexpr std::string_view kHeader = "#dise-surrogate-constants";

  static SurrogateConstants defaults() {
    SurrogateConstants k;
    k.version_ = "v1";
    auto &v = k.values_;
    v["base_c.CH0"] = 40;
    v["base_c.CH1"] = 35;
    v["base_c.CH2"] = 25;
    v["base_c.CH3"] = 10;
    v["base_c.CH4"] = 5;
    v["base_h.CH1"] = 1.6;
    v["base_h.CH2"] = 1.3;
    v["base_h.CH3"] = 0.9;
    v["base_h.CH4"] = 0.2;
    v["inc_c.C.Single"] = 8;
    v["inc_c.C.Double"] = 60;
    v["inc_c.C.Triple"] = 50;
    v["inc_c.C.Aromatic"] = 90;
    v["inc_c.C.SingleAromatic"] = 8;
    v["inc_c.O.Single"] = 40;
    v["inc_c.O.Double"] = 130;
    v["inc_c.O.Triple"] = 130;
    v["inc_c.O.Aromatic"] = 100;
    v["inc_c.O.SingleAromatic"] = 40;
    v["inc_c.N.Single"] = 20;
    v["inc_c.N.Double"] = 70;
    v["inc_c.N.Triple"] = 60;
    v["inc_c.N.Aromatic"] = 100;
    v["inc_c.N.SingleAromatic"] = 20;
    v["h_increment_scale"] = 0.01;
    return k;
  }

  static SurrogateConstants parse(std::string_view text) {
    SurrogateConstants k;
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (lineno == 1) {
        if (line.rfind(kHeader, 0) != 0)
          throw ParseError(1, 1, "missing surrogate-constants header");
        const auto rest = line.substr(kHeader.size());
        const auto pos = rest.find_first_not_of(' ');
        if (pos == std::string::npos)
          throw ParseError(1, kHeader.size() + 1, "missing version");
        k.version_ = rest.substr(pos);
        continue;
      }
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ParseError(lineno, 1, "expected key=value");
      try {
        std::size_t used = 0;
        const std::string value = line.substr(eq + 1);
        const double d = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument("trailing");
        k.values_[line.substr(0, eq)] = d;
      } catch (const std::logic_error &) {
        throw ParseError(lineno, eq + 2, "value is not a number");
      }
    }
    if (lineno == 0) throw ParseError(1, 1, "empty constants file");
    return k;
  }

  static SurrogateConstants load(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open constants file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  std::string serialize() const {
    std::string out = std::string(kHeader) + " " + version_ + "\n";
    for (const auto &[key, value] : values_) {
      std::ostringstream os;
      os.precision(17);
      os << value;
      out += key + "=" + os.str() + "\n";
    }
    return out;
  }

  const std::string &version() const noexcept { return version_; }

  double get(const std::string &key) const {
    auto it = values_.find(key);
    if (it == values_.end())
      throw InvariantViolation("surrogate constant missing: " + key);
    return it->second;
  }

  double base_c(AtomKind k) const { return get("base_c." + k.name()); }
  double base_h(AtomKind k) const { return get("base_h." + k.name()); }
  double increment(Element neighbor, BondClass b) const {
    return get("inc_c." + std::string(element_symbol(neighbor)) + "." +
               std::string(bond_label(b)));
  }
  double h_scale() const { return get("h_increment_scale"); }

  friend bool operator==(const SurrogateConstants &,
                         const SurrogateConstants &) = default;

 private:
  std::string version_ = "v1";
  std::map<std::string, double> values_;
};

// ---------------------------------------------------------------------------
// Shifts, HSQC, COSY

struct NodeShifts {
  std::vector<double> c;  // 0 for non-carbons
  std::vector<double> h;  // 0 unless a carbon carries hydrogens
};

// c(i) = base_c(kind_i) + sum of neighbor increments;
// h(i) = base_h(kind_i) + h_scale * (same sum). Carbons only. Graphs whose
// shifts leave [0, 250] / [0, 15] are rejected.
inline NodeShifts surrogate_shifts(
    const MolGraph &g,
    const SurrogateConstants &k = SurrogateConstants::defaults()) {
  const std::size_t n = g.size();
  NodeShifts out{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
  for (std::size_t i = 0; i < n; ++i) {
    const AtomKind kind = g.nodes()[i].kind;
    if (kind.element != Element::C) continue;
    if (!kind.known_hydrogens())
      throw InvariantViolation("surrogate shifts need super-atom carbons");
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const auto cls = g.edges()(i, j);
      if (!is_bond(cls)) continue;
      sum += k.increment(g.nodes()[j].kind.element,
                         static_cast<BondClass>(cls));
    }
    out.c[i] = k.base_c(kind) + sum;
    if (kind.hydrogens > 0) out.h[i] = k.base_h(kind) + k.h_scale() * sum;
    if (out.c[i] < 0 || out.c[i] > kMaxCarbonShift)
      throw ShiftOutOfRange("13C shift " + std::to_string(out.c[i]) +
                            " ppm at node " + std::to_string(i));
    if (out.h[i] < 0 || out.h[i] > kMaxProtonShift)
      throw ShiftOutOfRange("1H shift " + std::to_string(out.h[i]) +
                            " ppm at node " + std::to_string(i));
  }
  return out;
}

// Copy of `g` with surrogate shifts written into its nodes.
inline MolGraph with_surrogate_shifts(
    const MolGraph &g,
    const SurrogateConstants &k = SurrogateConstants::defaults()) {
  const auto s = surrogate_shifts(g, k);
  auto nodes = g.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    nodes[i].c_shift = s.c[i];
    nodes[i].h_shift = s.h[i];
  }
  return g.with_nodes(std::move(nodes));
}

struct HsqcPeak {
  std::size_t node = 0;
  double c_ppm = 0.0;
  double h_ppm = 0.0;
  int multiplicity = 0;

  friend bool operator==(const HsqcPeak &, const HsqcPeak &) = default;
};

// One cross peak per protonated carbon; quaternary carbons are silent.
inline std::vector<HsqcPeak> derive_hsqc(const MolGraph &g,
                                         const NodeShifts &s) {
  std::vector<HsqcPeak> out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const AtomKind kind = g.nodes()[i].kind;
    if (kind.element != Element::C || kind.hydrogens <= 0) continue;
    out.push_back({i, s.c[i], s.h[i], kind.hydrogens});
  }
  return out;
}

// mask(i, j) = 1 iff i and j are bonded carbons that both carry hydrogens.
inline CosyMask derive_cosy(const MolGraph &g) {
  const std::size_t n = g.size();
  CosyMask mask(n);
  auto protonated_carbon = [&](std::size_t i) {
    const AtomKind k = g.nodes()[i].kind;
    return k.element == Element::C && k.hydrogens > 0;
  };
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (is_bond(g.edges()(i, j)) && protonated_carbon(i) &&
          protonated_carbon(j))
        mask.set(i, j, 1);
  return mask;
}

// ---------------------------------------------------------------------------
// Spectral record

struct CarbonShift {
  std::size_t node = 0;
  double ppm = 0.0;
  friend bool operator==(const CarbonShift &, const CarbonShift &) = default;
};

struct ProtonShift {
  std::size_t node = 0;  // carbon carrying the protons
  double ppm = 0.0;
  friend bool operator==(const ProtonShift &, const ProtonShift &) = default;
};

struct CosyPeak {
  std::size_t node_a = 0;
  std::size_t node_b = 0;
  double h_a = 0.0;
  double h_b = 0.0;
  friend bool operator==(const CosyPeak &, const CosyPeak &) = default;
};

// What the instruments report for one molecule. Node ids refer to the
// source graph and only serve bookkeeping (perturbation keeps 2D peaks in
// step with the 1D shifts); model inputs are built from shift values.
struct SpectralRecord {
  Formula formula;
  std::vector<CarbonShift> carbons;
  std::vector<ProtonShift> protons;
  std::vector<HsqcPeak> hsqc;
  std::vector<CosyPeak> cosy;
  // Exchangeable-proton groups by kind name: "OH1", "NH1", "NH2".
  std::map<std::string, int> exchangeable;

  friend bool operator==(const SpectralRecord &,
                         const SpectralRecord &) = default;
};

inline void check_shift_ranges(const SpectralRecord &r) {
  for (const auto &c : r.carbons)
    if (c.ppm < 0 || c.ppm > kMaxCarbonShift)
      throw ShiftOutOfRange("13C shift out of range");
  for (const auto &h : r.protons)
    if (h.ppm < 0 || h.ppm > kMaxProtonShift)
      throw ShiftOutOfRange("1H shift out of range");
}

// Record of a graph whose nodes already carry shifts.
inline SpectralRecord record_from_graph(const MolGraph &g) {
  SpectralRecord r;
  const auto kinds = g.kinds();
  r.formula = formula_of(kinds);
  NodeShifts s{std::vector<double>(g.size()), std::vector<double>(g.size())};
  for (std::size_t i = 0; i < g.size(); ++i) {
    const Node &node = g.nodes()[i];
    s.c[i] = node.c_shift;
    s.h[i] = node.h_shift;
    if (node.kind.element == Element::C) {
      r.carbons.push_back({i, node.c_shift});
      if (node.kind.hydrogens > 0) r.protons.push_back({i, node.h_shift});
    } else if (node.kind.hydrogens > 0) {
      ++r.exchangeable[node.kind.name()];
    }
  }
  r.hsqc = derive_hsqc(g, s);
  const auto mask = derive_cosy(g);
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t j = i + 1; j < g.size(); ++j)
      if (mask(i, j)) r.cosy.push_back({i, j, s.h[i], s.h[j]});
  check_shift_ranges(r);
  return r;
}

inline SpectralRecord make_spectral_record(
    const MolGraph &g,
    const SurrogateConstants &k = SurrogateConstants::defaults()) {
  return record_from_graph(with_surrogate_shifts(g, k));
}

// ---------------------------------------------------------------------------
// Modalities

struct ModalityConfig {
  bool use_ms = true;
  bool use_h_shifts = true;
  bool use_c_shifts = true;
  bool use_hsqc = true;
  bool use_cosy = true;
  bool use_exchangeable_h = true;

  AtomAlphabet alphabet() const noexcept {
    return use_hsqc ? AtomAlphabet::SuperAtom : AtomAlphabet::Plain;
  }

  friend bool operator==(const ModalityConfig &,
                         const ModalityConfig &) = default;
};

struct NamedModality {
  std::string_view name;
  std::string_view description;
  ModalityConfig config;
};

// The six supported input combinations, weakest first.
inline const std::array<NamedModality, 6> &modality_table() {
  static const std::array<NamedModality, 6> table{{
      {"ms-1h", "MS + 1H NMR", {true, true, false, false, false, false}},
      {"ms-13c", "MS + 13C NMR", {true, false, true, false, false, false}},
      {"ms-1d", "MS + 1H & 13C NMR", {true, true, true, false, false, false}},
      {"ms-1d-hsqc", "MS + 1H & 13C NMR + HSQC",
       {true, true, true, true, false, false}},
      {"ms-1d-hsqc-cosy", "MS + 1H & 13C NMR + HSQC + COSY",
       {true, true, true, true, true, false}},
      {"full", "MS + 1H* & 13C NMR + HSQC + COSY",
       {true, true, true, true, true, true}},
  }};
  return table;
}

inline ModalityConfig modality_by_name(std::string_view name) {
  for (const auto &m : modality_table())
    if (m.name == name) return m.config;
  throw DataError("unknown modality '" + std::string(name) + "'");
}

inline std::string modality_name(const ModalityConfig &cfg) {
  for (const auto &m : modality_table())
    if (m.config == cfg) return std::string(m.name);
  throw DataError("modality combination is not one of the supported six");
}

// ---------------------------------------------------------------------------
// Model input

inline constexpr double kCosyMatchTolerance = 0.005;

// Fixed (time-invariant) part of the denoiser input: node kinds with the
// observed shifts, the COSY channel and the formula.
struct ModelInput {
  AtomAlphabet alphabet = AtomAlphabet::SuperAtom;
  std::vector<Node> nodes;
  CosyMask cosy;
  Formula formula;
  std::size_t ambiguous_cosy_peaks = 0;
  std::size_t unmatched_cosy_peaks = 0;
  // Record node id behind each carbon node; kNoSource for heteroatoms,
  // whose identity is not observed.
  std::vector<std::size_t> source;

  static constexpr std::size_t kNoSource = static_cast<std::size_t>(-1);

  std::size_t size() const noexcept { return nodes.size(); }

  std::vector<AtomKind> kinds() const {
    std::vector<AtomKind> out;
    for (const auto &n : nodes) out.push_back(n.kind);
    return out;
  }

  int formula_hydrogens() const {
    auto it = formula.find(Element::H);
    return it == formula.end() ? 0 : it->second;
  }
};

// Assembles nodes from formula + HSQC multiplicities (+ exchangeable groups)
// and resolves COSY cross peaks onto node pairs by proton shift. Carbons come
// first in record order, then oxygens, then nitrogens.
inline ModelInput build_model_input(const SpectralRecord &rec,
                                    const ModalityConfig &cfg) {
  if (cfg.use_exchangeable_h && !(cfg.use_hsqc && cfg.use_h_shifts))
    throw DataError("exchangeable protons need HSQC and 1H shifts");
  ModelInput in;
  in.alphabet = cfg.alphabet();
  in.formula = rec.formula;
  auto count = [&](Element e) {
    auto it = rec.formula.find(e);
    return it == rec.formula.end() ? 0 : it->second;
  };
  if (static_cast<int>(rec.carbons.size()) != count(Element::C))
    throw FormulaMismatch("carbon count disagrees with formula");

  std::map<std::size_t, double> proton_of;
  for (const auto &p : rec.protons) proton_of[p.node] = p.ppm;
  std::map<std::size_t, int> multiplicity_of;
  for (const auto &peak : rec.hsqc) multiplicity_of[peak.node] = peak.multiplicity;

  // record node id -> model node index, for carbons with protons
  std::vector<std::pair<double, std::size_t>> protonated;
  int carbon_h = 0;
  for (const auto &c : rec.carbons) {
    Node node;
    if (cfg.use_hsqc) {
      auto it = multiplicity_of.find(c.node);
      const int h = it == multiplicity_of.end() ? 0 : it->second;
      node.kind = AtomKind::super(Element::C, h);
      carbon_h += h;
    } else {
      node.kind = AtomKind::plain(Element::C);
    }
    if (cfg.use_c_shifts) node.c_shift = c.ppm;
    auto p = proton_of.find(c.node);
    if (p != proton_of.end()) {
      if (cfg.use_h_shifts) node.h_shift = p->second;
      protonated.emplace_back(p->second, in.nodes.size());
    }
    in.nodes.push_back(node);
    in.source.push_back(c.node);
  }

  const int n_o = count(Element::O);
  const int n_n = count(Element::N);
  const int h_total = count(Element::H);
  if (cfg.use_hsqc && cfg.use_exchangeable_h) {
    // heteroatom kinds named by the exchangeable groups, most hydrogens
    // first; the remaining heteroatoms carry none
    std::map<Element, std::vector<int>> hydrogens;
    int exchangeable_h = 0;
    for (const auto &[name, groups] : rec.exchangeable) {
      const auto kind = parse_atom_kind(name);
      if (!kind || !kind->known_hydrogens() || kind->element == Element::C ||
          kind->element == Element::H || groups < 0)
        throw FormulaMismatch("bad exchangeable group '" + name + "'");
      for (int g = 0; g < groups; ++g)
        hydrogens[kind->element].push_back(kind->hydrogens);
      exchangeable_h += groups * kind->hydrogens;
    }
    if (static_cast<int>(hydrogens[Element::O].size()) > n_o ||
        static_cast<int>(hydrogens[Element::N].size()) > n_n)
      throw FormulaMismatch("more exchangeable groups than heteroatoms");
    if (carbon_h + exchangeable_h != h_total)
      throw FormulaMismatch("HSQC + exchangeable hydrogens != formula H");
    for (auto [element, count] : {std::pair{Element::O, n_o}, std::pair{Element::N, n_n}}) {
      auto &hs = hydrogens[element];
      std::sort(hs.begin(), hs.end(), std::greater<>());
      hs.resize(count, 0);
      for (int h : hs) in.nodes.push_back({AtomKind::super(element, h)});
    }
  } else {
    if (cfg.use_hsqc) {
      const int rest = h_total - carbon_h;
      // an isolated water or ammonia carries 2 or 3
      if (rest < 0 || rest > 2 * n_o + 3 * n_n)
        throw FormulaMismatch("HSQC hydrogens inconsistent with formula H");
    }
    for (int i = 0; i < n_o; ++i)
      in.nodes.push_back({AtomKind::plain(Element::O)});
    for (int i = 0; i < n_n; ++i)
      in.nodes.push_back({AtomKind::plain(Element::N)});
  }

  in.source.resize(in.nodes.size(), ModelInput::kNoSource);
  in.cosy = CosyMask(in.nodes.size());
  if (cfg.use_cosy) {
    for (const auto &peak : rec.cosy) {
      std::size_t matches = 0;
      for (std::size_t a = 0; a < protonated.size(); ++a)
        for (std::size_t b = a + 1; b < protonated.size(); ++b) {
          const double ha = protonated[a].first, hb = protonated[b].first;
          const bool direct = std::abs(ha - peak.h_a) <= kCosyMatchTolerance &&
                              std::abs(hb - peak.h_b) <= kCosyMatchTolerance;
          const bool swapped =
              std::abs(ha - peak.h_b) <= kCosyMatchTolerance &&
              std::abs(hb - peak.h_a) <= kCosyMatchTolerance;
          if (!direct && !swapped) continue;
          in.cosy.set(protonated[a].second, protonated[b].second, 1);
          ++matches;
        }
      if (matches == 0) ++in.unmatched_cosy_peaks;
      if (matches > 1) ++in.ambiguous_cosy_peaks;
    }
  }
  return in;
}

// ---------------------------------------------------------------------------
// Perturbation

struct PerturbationLevel {
  std::string_view name = "None";
  double delta_c = 0.0;
  double delta_h = 0.0;
};

inline constexpr PerturbationLevel kNoPerturbation{"None", 0.0, 0.0};
inline constexpr PerturbationLevel kSmallPerturbation{"SP", 1.0, 0.1};
inline constexpr PerturbationLevel kMediumPerturbation{"MP", 3.0, 0.5};
inline constexpr PerturbationLevel kLargePerturbation{"LP", 5.0, 1.0};

inline PerturbationLevel perturbation_by_name(std::string_view name) {
  for (const auto &l : {kNoPerturbation, kSmallPerturbation,
                        kMediumPerturbation, kLargePerturbation}) {
    std::string lower(l.name);
    for (auto &ch : lower) ch = static_cast<char>(std::tolower(ch));
    if (name == l.name || name == lower) return l;
  }
  throw DataError("unknown perturbation level '" + std::string(name) + "'");
}

// Adds U[-delta, +delta] to every 13C and 1H shift (carbons first, then
// protons, in record order), clamps to the legal ranges and rewrites the 2D
// peaks from the perturbed node shifts.
inline SpectralRecord perturb(const SpectralRecord &rec,
                              const PerturbationLevel &level,
                              std::uint64_t seed) {
  if (level.delta_c == 0.0 && level.delta_h == 0.0) return rec;
  SpectralRecord out = rec;
  Rng rng(seed);
  std::map<std::size_t, double> c_of, h_of;
  for (auto &c : out.carbons) {
    c.ppm = std::clamp(c.ppm + rng.uniform(-level.delta_c, level.delta_c), 0.0,
                       kMaxCarbonShift);
    c_of[c.node] = c.ppm;
  }
  for (auto &h : out.protons) {
    h.ppm = std::clamp(h.ppm + rng.uniform(-level.delta_h, level.delta_h), 0.0,
                       kMaxProtonShift);
    h_of[h.node] = h.ppm;
  }
  for (auto &peak : out.hsqc) {
    peak.c_ppm = c_of.at(peak.node);
    peak.h_ppm = h_of.at(peak.node);
  }
  for (auto &peak : out.cosy) {
    peak.h_a = h_of.at(peak.node_a);
    peak.h_b = h_of.at(peak.node_b);
  }
  return out;
}

}  // namespace dise
