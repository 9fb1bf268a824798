#pragma once

// Log-space probability primitives shared by every objective.
//
// All probability math is carried as natural-log probabilities; a ProbVector
// is only materialized where a caller needs plain probabilities. Log-probs are
// floored at kLogProbFloor so that products like p * log p evaluate to zero at
// saturation instead of producing 0 * -inf.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sftlab/error.hpp"

namespace sftlab {

inline constexpr double kLogProbFloor = -745.0;

// exp(-745) is still a subnormal, so the floor maps to exactly zero mass.
inline double floored_exp(double log_p) { return log_p <= kLogProbFloor ? 0.0 : std::exp(log_p); }

namespace detail {

inline void require_finite(std::span<const double> v, const char* what) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw InvalidInput(std::string(what) + ": non-finite entry at index " + std::to_string(i));
    }
  }
}

// log(sum(exp(v))) with max subtraction; the dominant term is split off so
// that log1p keeps precision when the rest is tiny.
inline double logsumexp(std::span<const double> v) {
  const auto top = std::max_element(v.begin(), v.end());
  const double m = *top;
  double rest = 0.0;
  for (auto it = v.begin(); it != v.end(); ++it) {
    if (it != top) rest += std::exp(*it - m);
  }
  return m + std::log1p(rest);
}

struct unchecked_t {};
inline constexpr unchecked_t unchecked{};

}  // namespace detail

/// Unnormalized scores over a vocabulary. At least two entries, all finite.
class LogitVector {
 public:
  explicit LogitVector(std::vector<double> values) : values_(std::move(values)) {
    if (values_.size() < 2) throw InvalidInput("LogitVector: need at least 2 entries");
    detail::require_finite(values_, "LogitVector");
  }

  std::span<const double> values() const noexcept { return values_; }
  std::size_t size() const noexcept { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }

 private:
  std::vector<double> values_;
};

/// A categorical distribution: entries in [0,1] summing to 1 within 1e-9.
class ProbVector {
 public:
  explicit ProbVector(std::vector<double> values) : values_(std::move(values)) {
    if (values_.empty()) throw InvalidInput("ProbVector: empty");
    detail::require_finite(values_, "ProbVector");
    double total = 0.0;
    for (double p : values_) {
      if (p < 0.0 || p > 1.0) throw InvalidInput("ProbVector: entry outside [0,1]");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw InvalidInput("ProbVector: entries sum to " + std::to_string(total));
    }
  }
  ProbVector(detail::unchecked_t, std::vector<double> values) : values_(std::move(values)) {}

  std::span<const double> values() const noexcept { return values_; }
  std::size_t size() const noexcept { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }

 private:
  std::vector<double> values_;
};

/// Natural-log probabilities: entries <= 0 with logsumexp = 0 within 1e-9.
class LogProbVector {
 public:
  explicit LogProbVector(std::vector<double> values) : values_(std::move(values)) {
    if (values_.size() < 2) throw InvalidInput("LogProbVector: need at least 2 entries");
    detail::require_finite(values_, "LogProbVector");
    for (double l : values_) {
      if (l > 0.0) throw InvalidInput("LogProbVector: positive log-probability");
    }
    if (std::abs(detail::logsumexp(values_)) > 1e-9) {
      throw InvalidInput("LogProbVector: not normalized");
    }
  }
  LogProbVector(detail::unchecked_t, std::vector<double> values) : values_(std::move(values)) {}

  static LogProbVector from_probs(const ProbVector& p) {
    std::vector<double> l(p.size());
    std::transform(p.values().begin(), p.values().end(), l.begin(),
                   [](double x) { return x > 0.0 ? std::max(std::log(x), kLogProbFloor) : kLogProbFloor; });
    return LogProbVector(detail::unchecked, std::move(l));
  }

  std::span<const double> values() const noexcept { return values_; }
  std::size_t size() const noexcept { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }

  double prob(std::size_t i) const { return floored_exp(values_[i]); }
  std::vector<double> probs_raw() const {
    std::vector<double> p(values_.size());
    std::transform(values_.begin(), values_.end(), p.begin(), [](double l) { return floored_exp(l); });
    return p;
  }
  ProbVector probs() const { return ProbVector(detail::unchecked, probs_raw()); }

 private:
  std::vector<double> values_;
};

/// Temperature beta in (0, 1]. beta = 1 is the identity.
class Temperature {
 public:
  explicit Temperature(double beta) : beta_(beta) {
    if (!(beta > 0.0) || beta > 1.0 || !std::isfinite(beta)) {
      throw DomainError("temperature beta must lie in (0, 1], got " + std::to_string(beta));
    }
  }
  double value() const noexcept { return beta_; }

 private:
  double beta_;
};

namespace detail {

// l_i = (z_i - max) - log1p(rest). Subtracting the max before the log term
// keeps the dominant entry's log-prob exact when rest is tiny.
inline LogProbVector log_softmax_raw(std::span<const double> z) {
  const auto top = std::max_element(z.begin(), z.end());
  const double m = *top;
  double rest = 0.0;
  for (auto it = z.begin(); it != z.end(); ++it) {
    if (it != top) rest += std::exp(*it - m);
  }
  const double log_norm = std::log1p(rest);
  std::vector<double> l(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) l[i] = std::max((z[i] - m) - log_norm, kLogProbFloor);
  return LogProbVector(unchecked, std::move(l));
}

}  // namespace detail

inline LogProbVector log_softmax(const LogitVector& z) { return detail::log_softmax_raw(z.values()); }

/// Log of the temperature-scaled distribution softmax(l / beta).
inline LogProbVector temper_log(const LogProbVector& l, Temperature beta) {
  if (beta.value() == 1.0) return l;
  std::vector<double> scaled(l.size());
  for (std::size_t i = 0; i < l.size(); ++i) scaled[i] = l[i] / beta.value();
  return detail::log_softmax_raw(scaled);
}

inline ProbVector temper(const LogProbVector& l, Temperature beta) { return temper_log(l, beta).probs(); }

/// Row i of the Jacobian d l_i / d z_j = delta_ij - p_j.
inline std::vector<double> logit_jacobian_row(const LogProbVector& l, std::size_t i) {
  if (i >= l.size()) {
    throw InvalidInput("logit_jacobian_row: index " + std::to_string(i) + " out of range");
  }
  std::vector<double> row(l.size());
  for (std::size_t j = 0; j < l.size(); ++j) row[j] = (i == j ? 1.0 : 0.0) - l.prob(j);
  return row;
}

/// Shannon entropy (nats) of the distribution represented by l.
inline double entropy(const LogProbVector& l) {
  double h = 0.0;
  for (std::size_t i = 0; i < l.size(); ++i) h -= l.prob(i) * l[i];
  return h;
}

/// dH/dz_j = -p_j (l_j - sum_i l_i p_i). Stays bounded as any p_j -> 0.
inline std::vector<double> entropy_logit_gradient(const LogProbVector& l) {
  const double mean_log = -entropy(l);
  std::vector<double> g(l.size());
  for (std::size_t j = 0; j < l.size(); ++j) g[j] = -l.prob(j) * (l[j] - mean_log);
  return g;
}

}  // namespace sftlab
