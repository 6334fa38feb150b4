// Discovery-quality metrics: mean relative coefficient error (percent,
// defined only on an exact support match), relative coefficient-vector
// error and true-positive rate over the support union, and the relative
// L2 error between reconstructed and reference fields. Includes the infix
// equation parser that turns a truth string like
// "u_t = -1.0*u*u_x + 0.1*u_xx" into a canonical-key coefficient map.
#pragma once

#include "pded/term_eval.hpp"

#include <cctype>
#include <map>
#include <optional>

namespace pded {

using CoeffMap = std::map<std::string, double>;

// ───────────────────────── equation parsing ─────────────────────────

namespace detail {

// Recursive-descent parser for "<state>_t = c1*f1*f2 + c2*f3 ...". Factors
// are '*'-separated; derivative suffixes nest innermost-first, so u_xxx is
// d1(d2(u,x),x); '^2' squares the preceding factor; repeated terms fold by
// summed coefficient.
class EquationParser {
 public:
  EquationParser(const std::string& text, const TokenLibrary& lib)
      : s_(text), lib_(lib) {}

  CoeffMap parse() {
    const std::size_t eq = s_.find('=');
    if (eq != std::string::npos) {
      parse_lhs(eq);
      i_ = eq + 1;
    }
    CoeffMap out;
    skip();
    if (done()) throw Error(Errc::IncompleteExpression, "empty equation");
    bool first = true;
    while (!done()) {
      double sign = 1.0;
      if (eat('+')) {
        sign = 1.0;
      } else if (eat('-')) {
        sign = -1.0;
      } else if (!first) {
        throw Error(Errc::TrailingTokens,
                    "expected '+' or '-' before '" + rest() + "'");
      }
      first = false;
      skip();
      double coeff = 1.0;
      if (!done() && (std::isdigit(static_cast<unsigned char>(byte())) ||
                      byte() == '.')) {
        coeff = number();
        eat('*');
      }
      skip();
      if (done() || !std::isalpha(static_cast<unsigned char>(byte())))
        throw Error(Errc::IncompleteExpression,
                    "term needs at least one symbol factor");
      TreeNode term = factor();
      while (eat('*')) term = TreeNode{lib_.require_find("*"), {term, factor()}};
      validate_tree(term, lib_);
      out[canonical_key(term, lib_)] += sign * coeff;
      skip();
    }
    return out;
  }

 private:
  bool done() const { return i_ >= s_.size(); }
  char byte() const { return s_[i_]; }
  void skip() {
    while (!done() && std::isspace(static_cast<unsigned char>(byte()))) ++i_;
  }
  bool eat(char c) {
    skip();
    if (done() || byte() != c) return false;
    ++i_;
    return true;
  }
  std::string rest() const { return s_.substr(i_); }

  double number() {
    const char* start = s_.c_str() + i_;
    char* end = nullptr;
    const double v = std::strtod(start, &end);
    if (end == start) throw Error(Errc::IoError, "bad number at '" + rest() + "'");
    i_ += std::size_t(end - start);
    return v;
  }

  std::string ident() {
    skip();
    std::size_t j = i_;
    while (j < s_.size() &&
           (std::isalnum(static_cast<unsigned char>(s_[j])) || s_[j] == '_' ||
            s_[j] == '\''))
      ++j;
    if (j == i_)
      throw Error(Errc::IncompleteExpression, "expected symbol at '" + rest() + "'");
    std::string name = s_.substr(i_, j - i_);
    i_ = j;
    return name;
  }

  void parse_lhs(std::size_t eq) {
    const std::string lhs = s_.substr(0, eq);
    std::size_t a = lhs.find_first_not_of(" \t");
    std::size_t b = lhs.find_last_not_of(" \t");
    const std::string name =
        a == std::string::npos ? "" : lhs.substr(a, b - a + 1);
    if (name.size() < 3 || name.substr(name.size() - 2) != "_t" ||
        lib_.find(name.substr(0, name.size() - 2)) < 0)
      throw Error(Errc::UnknownSymbol,
                  "left-hand side must be a state time derivative, got '" +
                      name + "'");
  }

  TreeNode factor() {
    const std::string name = ident();
    std::size_t us = name.find('_');
    std::string base = name.substr(0, us == std::string::npos ? name.size() : us);
    const int ord = lib_.require_find(base);
    if (lib_.arity(ord) != 0)
      throw Error(Errc::UnknownSymbol, "'" + base + "' is not a variable");
    TreeNode node{ord, {}};
    if (us != std::string::npos) {
      const std::string suffix = name.substr(us + 1);
      if (suffix.empty())
        throw Error(Errc::IncompleteExpression, "dangling '_' in '" + name + "'");
      const int d1 = lib_.require_find("d1");
      const int d2 = lib_.find("d2");
      std::size_t p = 0;
      while (p < suffix.size()) {
        std::size_t run = 1;
        while (p + run < suffix.size() && suffix[p + run] == suffix[p]) ++run;
        const int axis = lib_.require_find(std::string(1, suffix[p]));
        if (!lib_.is_spatial(axis))
          throw Error(Errc::UnknownSymbol,
                      "derivative axis '" + std::string(1, suffix[p]) +
                          "' is not spatial");
        p += run;
        TreeNode ax{axis, {}};
        while (run >= 2 && d2 >= 0) {
          node = TreeNode{d2, {node, ax}};
          run -= 2;
        }
        while (run >= 1) {
          node = TreeNode{d1, {node, ax}};
          run -= 1;
        }
      }
    }
    if (eat('^')) {
      if (!eat('2'))
        throw Error(Errc::UnknownSymbol, "only squaring is supported");
      node = TreeNode{lib_.require_find("^2"), {node}};
    }
    return node;
  }

  const std::string& s_;
  std::size_t i_ = 0;
  const TokenLibrary& lib_;
};

}  // namespace detail

inline CoeffMap parse_equation(const std::string& text, const TokenLibrary& lib) {
  return detail::EquationParser(text, lib).parse();
}

// Canonical-key coefficient map of a fitted candidate.
inline CoeffMap candidate_coeffs(const PdeCandidate& cand) {
  CoeffMap m;
  for (std::size_t i = 0; i < cand.terms.size(); ++i)
    m[cand.terms[i].key] += cand.xi(Eigen::Index(i));
  return m;
}

// ───────────────────────── metrics ─────────────────────────

// Mean over true terms of |xi* - xi|/|xi| x 100. Defined only when the
// discovered support equals the true support exactly.
inline std::optional<double> coeff_error_E(const CoeffMap& discovered,
                                           const CoeffMap& truth) {
  if (discovered.size() != truth.size()) return std::nullopt;
  for (const auto& kv : truth)
    if (!discovered.count(kv.first)) return std::nullopt;
  if (truth.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& [key, coeff] : truth)
    sum += std::abs(discovered.at(key) - coeff) / std::abs(coeff);
  return 100.0 * sum / double(truth.size());
}

// E2 = ||xi* - xi||_2 / ||xi||_2 over the support union (absent terms are
// zero); TPR = TP / (TP + FN + FP).
inline std::pair<double, double> support_metrics(const CoeffMap& discovered,
                                                 const CoeffMap& truth) {
  double num = 0.0, den = 0.0;
  std::size_t tp = 0, fp = 0, fn = 0;
  for (const auto& [key, coeff] : truth) {
    const auto it = discovered.find(key);
    const double disc = it == discovered.end() ? 0.0 : it->second;
    num += (disc - coeff) * (disc - coeff);
    den += coeff * coeff;
    (it == discovered.end() ? fn : tp) += 1;
  }
  for (const auto& [key, coeff] : discovered)
    if (!truth.count(key)) {
      num += coeff * coeff;
      fp += 1;
    }
  const double e2 = den > 0.0 ? std::sqrt(num) / std::sqrt(den)
                              : (num > 0.0 ? std::numeric_limits<double>::infinity()
                                           : 0.0);
  const std::size_t denom = tp + fn + fp;
  const double tpr = denom == 0 ? 1.0 : double(tp) / double(denom);
  return {e2, tpr};
}

// ||pred - truth||_2 / ||truth||_2 over all grid points.
inline double field_l2(const Arr& pred, const Arr& truth) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols())
    throw Error(Errc::DimensionMismatch, "field shapes differ");
  const double den = std::sqrt(truth.square().sum());
  const double num = std::sqrt((pred - truth).square().sum());
  if (den == 0.0)
    return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return num / den;
}

struct MatchedTerm {
  std::string key;
  double discovered = 0.0;  // zero when the term was missed
  double truth = 0.0;
};

struct DiscoveryScore {
  std::optional<double> e_coeff;  // percent; empty on support mismatch
  double e2 = 0.0;
  double tpr = 0.0;
  bool support_match = false;
  std::optional<double> l2;  // filled when a reconstructed field is scored
  std::vector<MatchedTerm> matched;  // one row per true term
};

inline DiscoveryScore score_discovery(const CoeffMap& discovered,
                                      const CoeffMap& truth) {
  DiscoveryScore s;
  s.e_coeff = coeff_error_E(discovered, truth);
  std::tie(s.e2, s.tpr) = support_metrics(discovered, truth);
  s.support_match = s.e_coeff.has_value();
  for (const auto& [key, coeff] : truth) {
    const auto it = discovered.find(key);
    s.matched.push_back({key, it == discovered.end() ? 0.0 : it->second, coeff});
  }
  return s;
}

inline nlohmann::json score_to_json(const DiscoveryScore& s) {
  nlohmann::json matched = nlohmann::json::array();
  for (const MatchedTerm& m : s.matched)
    matched.push_back(
        {{"term", m.key}, {"discovered", m.discovered}, {"truth", m.truth}});
  return {{"E_percent", s.e_coeff ? nlohmann::json(*s.e_coeff) : nlohmann::json()},
          {"E2", s.e2},
          {"TPR", s.tpr},
          {"support_match", s.support_match},
          {"L2", s.l2 ? nlohmann::json(*s.l2) : nlohmann::json()},
          {"matched", matched}};
}

}  // namespace pded
