//
// dise - discrete diffusion structure elucidation
// SPDX-License-Identifier: Apache-2.0
//

#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dise/common.hpp"

namespace dise {

enum class Element : std::uint8_t { C = 0, H = 1, O = 2, N = 3 };

constexpr int base_valence(Element e) noexcept {
  switch (e) {
    case Element::C: return 4;
    case Element::H: return 1;
    case Element::O: return 2;
    case Element::N: return 3;
  }
  return 0;
}

constexpr std::string_view element_symbol(Element e) noexcept {
  switch (e) {
    case Element::C: return "C";
    case Element::H: return "H";
    case Element::O: return "O";
    case Element::N: return "N";
  }
  return "?";
}

inline std::optional<Element> parse_element(std::string_view s) {
  if (s == "C") return Element::C;
  if (s == "H") return Element::H;
  if (s == "O") return Element::O;
  if (s == "N") return Element::N;
  return std::nullopt;
}

// Bond alphabet. Index 0 is always NoBond; the five-class alphabet drops
// SingleAromatic.
enum class BondClass : std::uint8_t {
  NoBond = 0,
  Single = 1,
  Double = 2,
  Triple = 3,
  Aromatic = 4,
  SingleAromatic = 5,
};

inline constexpr int kMaxBondClasses = 6;

// Bond order used for valence sums. SingleAromatic counts as a single bond.
constexpr double bond_order(BondClass b) noexcept {
  switch (b) {
    case BondClass::NoBond: return 0.0;
    case BondClass::Single: return 1.0;
    case BondClass::Double: return 2.0;
    case BondClass::Triple: return 3.0;
    case BondClass::Aromatic: return 1.5;
    case BondClass::SingleAromatic: return 1.0;
  }
  return 0.0;
}

constexpr double bond_order(std::uint8_t cls) noexcept {
  return bond_order(static_cast<BondClass>(cls));
}

constexpr std::string_view bond_label(BondClass b) noexcept {
  switch (b) {
    case BondClass::NoBond: return "NoBond";
    case BondClass::Single: return "Single";
    case BondClass::Double: return "Double";
    case BondClass::Triple: return "Triple";
    case BondClass::Aromatic: return "Aromatic";
    case BondClass::SingleAromatic: return "SingleAromatic";
  }
  return "?";
}

// A heavy atom with its attached hydrogens folded in. `hydrogens < 0` marks
// a plain (element-only) node whose hydrogen count is not observed; such a
// node is expected to carry the element's full base valence in bonds plus
// implicit hydrogens.
struct AtomKind {
  Element element = Element::C;
  std::int8_t hydrogens = -1;

  static constexpr AtomKind plain(Element e) noexcept { return {e, -1}; }
  static constexpr AtomKind super(Element e, int h) noexcept {
    return {e, static_cast<std::int8_t>(h)};
  }

  constexpr bool known_hydrogens() const noexcept { return hydrogens >= 0; }

  constexpr int expected_valence() const noexcept {
    return base_valence(element) - (known_hydrogens() ? hydrogens : 0);
  }

  std::string name() const {
    std::string s(element_symbol(element));
    if (known_hydrogens()) {
      s += 'H';
      s += static_cast<char>('0' + hydrogens);
    }
    return s;
  }

  friend constexpr bool operator==(AtomKind, AtomKind) = default;
  friend constexpr auto operator<=>(AtomKind a, AtomKind b) noexcept {
    if (a.element != b.element) return a.element <=> b.element;
    return a.hydrogens <=> b.hydrogens;
  }
};

// Parses "CH2", "OH0", "N", ... Inverse of AtomKind::name().
inline std::optional<AtomKind> parse_atom_kind(std::string_view s) {
  if (s.empty()) return std::nullopt;
  const auto e = parse_element(s.substr(0, 1));
  if (!e) return std::nullopt;
  if (s.size() == 1) return AtomKind::plain(*e);
  if (s.size() != 3 || s[1] != 'H' || s[2] < '0' || s[2] > '9')
    return std::nullopt;
  const int h = s[2] - '0';
  if (h > base_valence(*e)) return std::nullopt;
  return AtomKind::super(*e, h);
}

// Largest hydrogen count a bonded (n > 1) super-atom may carry.
constexpr int max_bonded_hydrogens(Element e) noexcept {
  return base_valence(e) - 1;
}

// Node-type alphabets for the type one-hot.
enum class AtomAlphabet : std::uint8_t {
  Plain,      // C, H, O, N
  SuperAtom,  // CH0..CH3, OH0, OH1, NH0..NH2
};

constexpr int alphabet_size(AtomAlphabet a) noexcept {
  return a == AtomAlphabet::Plain ? 4 : 9;
}

// One-hot slot of `kind` in `alphabet`. Under the super-atom alphabet a
// heteroatom with unobserved hydrogens shares the H0 slot. Throws for kinds
// outside the alphabet (e.g. fully saturated lone atoms such as CH4).
inline int alphabet_index(AtomAlphabet alphabet, AtomKind kind) {
  if (alphabet == AtomAlphabet::Plain) return static_cast<int>(kind.element);
  const int h = kind.known_hydrogens() ? kind.hydrogens : 0;
  switch (kind.element) {
    case Element::C:
      if (kind.known_hydrogens() && h <= 3) return h;
      break;
    case Element::O:
      if (h <= 1) return 4 + h;
      break;
    case Element::N:
      if (h <= 2) return 6 + h;
      break;
    case Element::H:
      break;
  }
  throw InvariantViolation("atom kind " + kind.name() +
                           " is outside the super-atom alphabet");
}

using Formula = std::map<Element, int>;

inline std::string formula_string(const Formula &f) {
  std::string s;
  for (Element e : {Element::C, Element::H, Element::N, Element::O}) {
    auto it = f.find(e);
    if (it == f.end() || it->second == 0) continue;
    s += element_symbol(e);
    if (it->second != 1) s += std::to_string(it->second);
  }
  return s;
}

}  // namespace dise
