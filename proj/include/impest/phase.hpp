#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace impest {

enum class Phase : std::uint8_t { A = 0, B = 1, C = 2 };

inline char phase_char(Phase p) { return "abc"[static_cast<int>(p)]; }

inline Phase phase_from_char(char c) {
  switch (c) {
    case 'a': return Phase::A;
    case 'b': return Phase::B;
    case 'c': return Phase::C;
    default: throw std::invalid_argument(std::string("unknown phase '") + c + "'");
  }
}

/// Subset of {a,b,c} kept in canonical a<b<c order. Matrix rows/columns of an
/// ImpedanceMatrix follow this order.
class PhaseSet {
 public:
  PhaseSet() = default;

  static PhaseSet parse(const std::string& s) {
    PhaseSet ps;
    int prev = -1;
    for (char c : s) {
      int idx = static_cast<int>(phase_from_char(c));
      if (idx == prev) throw std::invalid_argument("duplicate phase in '" + s + "'");
      if (idx < prev) throw std::invalid_argument("phases must be listed in a,b,c order: '" + s + "'");
      ps.mask_ |= (1u << idx);
      prev = idx;
    }
    if (ps.mask_ == 0) throw std::invalid_argument("empty phase set");
    return ps;
  }

  static PhaseSet abc() { return parse("abc"); }
  static PhaseSet single(Phase p) {
    PhaseSet ps;
    ps.mask_ = 1u << static_cast<int>(p);
    return ps;
  }

  bool contains(Phase p) const { return mask_ & (1u << static_cast<int>(p)); }
  bool contains_all(const PhaseSet& other) const { return (mask_ & other.mask_) == other.mask_; }
  int size() const { return __builtin_popcount(mask_); }
  bool empty() const { return mask_ == 0; }

  /// Position of phase p within this set (0-based), for matrix indexing.
  int index_of(Phase p) const {
    if (!contains(p)) throw std::out_of_range("phase not in set");
    int idx = 0;
    for (int i = 0; i < static_cast<int>(p); ++i)
      if (mask_ & (1u << i)) ++idx;
    return idx;
  }

  std::array<Phase, 3> phases() const {
    std::array<Phase, 3> out{};
    int n = 0;
    for (int i = 0; i < 3; ++i)
      if (mask_ & (1u << i)) out[n++] = static_cast<Phase>(i);
    return out;
  }

  std::string str() const {
    std::string s;
    for (int i = 0; i < 3; ++i)
      if (mask_ & (1u << i)) s += "abc"[i];
    return s;
  }

  bool operator==(const PhaseSet& other) const { return mask_ == other.mask_; }
  bool operator!=(const PhaseSet& other) const { return mask_ != other.mask_; }

  // Iteration over contained phases.
  class iterator {
   public:
    iterator(std::uint8_t mask, int pos) : mask_(mask), pos_(pos) { advance(); }
    Phase operator*() const { return static_cast<Phase>(pos_); }
    iterator& operator++() {
      ++pos_;
      advance();
      return *this;
    }
    bool operator!=(const iterator& other) const { return pos_ != other.pos_; }

   private:
    void advance() {
      while (pos_ < 3 && !(mask_ & (1u << pos_))) ++pos_;
    }
    std::uint8_t mask_;
    int pos_;
  };

  iterator begin() const { return iterator(mask_, 0); }
  iterator end() const { return iterator(mask_, 3); }

 private:
  std::uint8_t mask_ = 0;
};

}  // namespace impest
