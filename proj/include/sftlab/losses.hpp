#pragma once

// Per-token fine-tuning objectives with closed-form logit gradients.
//
// Every gradient here is assembled from its closed form. Quantities that the
// objectives treat as detached (the tempered distribution inside GEM, the focal
// coefficient inside TOFU, the lambda-PR weight) are computed once as plain
// constants; the value expressions are only used for reporting and for the
// finite-difference oracle.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "sftlab/error.hpp"
#include "sftlab/numeric.hpp"

namespace sftlab {

class TargetSpec {
 public:
  static TargetSpec one_hot(std::size_t index) { return TargetSpec(index); }
  static TargetSpec soft(ProbVector dist) { return TargetSpec(std::move(dist)); }

  bool is_one_hot() const noexcept { return std::holds_alternative<std::size_t>(target_); }

  std::size_t index() const {
    if (!is_one_hot()) throw UnsupportedTarget("target is not one-hot");
    return std::get<std::size_t>(target_);
  }

  const ProbVector& dist() const { return std::get<ProbVector>(target_); }

  /// Checks the target against a vocabulary of size `vocab`.
  void validate(std::size_t vocab) const {
    if (is_one_hot()) {
      if (index() >= vocab) {
        throw InvalidInput("one-hot target " + std::to_string(index()) + " out of range for vocab " +
                           std::to_string(vocab));
      }
    } else if (dist().size() != vocab) {
      throw InvalidInput("soft target size does not match vocab");
    }
  }

  std::vector<double> dense(std::size_t vocab) const {
    validate(vocab);
    if (is_one_hot()) {
      std::vector<double> q(vocab, 0.0);
      q[index()] = 1.0;
      return q;
    }
    return {dist().values().begin(), dist().values().end()};
  }

 private:
  explicit TargetSpec(std::size_t index) : target_(index) {}
  explicit TargetSpec(ProbVector dist) : target_(std::move(dist)) {}

  std::variant<std::size_t, ProbVector> target_;
};

struct FocalConfig {
  double gamma = 3.0;
};

struct TofuConfig {
  double gamma = 3.0;
  Temperature beta{0.8};
};

/// lambda-PR hyperparameters plus the (1-based) response position and length.
struct PrConfig {
  double lambda = 1.0;
  double alpha = 0.5;
  std::size_t position = 1;
  std::size_t length = 1;

  /// Drop threshold delta = alpha lambda^(1/L) / (1 - (1 - alpha) lambda^(1/L)).
  double threshold() const {
    if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda-PR: lambda must be > 0");
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("lambda-PR: alpha must lie in [0,1]");
    if (position < 1 || length < 1 || position > length) {
      throw ConfigError("lambda-PR: need 1 <= position <= length");
    }
    const double root = std::pow(lambda, 1.0 / static_cast<double>(length));
    double delta = alpha * root / (1.0 - (1.0 - alpha) * root);
    // alpha / (1 - (1 - alpha)) at lambda = 1 can round a hair above 1.
    if (delta > 1.0 && delta <= 1.0 + 1e-12) delta = 1.0;
    if (!(delta > 0.0 && delta <= 1.0)) {
      throw ConfigError("lambda-PR: derived delta = " + std::to_string(delta) + " lies outside (0, 1]");
    }
    return delta;
  }
};

struct LossResult {
  double value = 0.0;
  std::vector<double> grad;
};

// ---------------------------------------------------------------------------
// Scalar weighting functions

namespace detail {

inline void require_gamma(double gamma) {
  if (!(gamma >= 0.0) || !std::isfinite(gamma)) {
    throw DomainError("focal gamma must be >= 0, got " + std::to_string(gamma));
  }
}

// g(p, gamma) given p, 1 - p and log p computed independently.
inline double focal_scaling_core(double p, double one_minus, double log_p, double gamma) {
  if (gamma == 0.0) return 1.0;
  if (one_minus <= 0.0) return 0.0;
  if (p <= 0.0) return 1.0;
  return std::pow(one_minus, gamma) - gamma * p * std::pow(one_minus, gamma - 1.0) * log_p;
}

inline double focal_complement_core(double p, double one_minus, double log_p, double gamma) {
  if (gamma == 0.0) return 0.0;
  if (one_minus <= 0.0) return 1.0;
  if (p <= 0.0) return 0.0;
  const double log_one_minus = p < 0.5 ? std::log1p(-p) : std::log(one_minus);
  return -std::expm1(gamma * log_one_minus) + gamma * p * std::pow(one_minus, gamma - 1.0) * log_p;
}

}  // namespace detail

/// Focal gradient-scaling function g(p, gamma) = (1-p)^gamma - gamma p (1-p)^(gamma-1) log p.
/// Returns the analytic limits g(0, gamma) = 1 and g(1, gamma) = 0 for gamma > 0.
inline double focal_scaling(double p_hat, double gamma) {
  detail::require_gamma(gamma);
  if (!(p_hat >= 0.0 && p_hat <= 1.0)) throw InvalidInput("focal_scaling: p outside [0,1]");
  return detail::focal_scaling_core(p_hat, 1.0 - p_hat, p_hat > 0.0 ? std::log(p_hat) : 0.0, gamma);
}

/// g evaluated from a log-probability; 1 - p is taken as -expm1(log_p) so that
/// saturated probabilities keep their distance from 1.
inline double focal_scaling_from_log(double log_p, double gamma) {
  detail::require_gamma(gamma);
  return detail::focal_scaling_core(floored_exp(log_p), -std::expm1(log_p), log_p, gamma);
}

/// 1 - g(p, gamma), accurate where g rounds to 1 (p -> 0).
inline double focal_scaling_complement_from_log(double log_p, double gamma) {
  detail::require_gamma(gamma);
  return detail::focal_complement_core(floored_exp(log_p), -std::expm1(log_p), log_p, gamma);
}

/// lambda-PR token weight lambda^((l-1)/L) * 1[p <= delta] * p / (alpha + (1 - alpha) p).
inline double pr_weight(double p_hat, const PrConfig& cfg) {
  const double delta = cfg.threshold();
  if (!(p_hat >= 0.0 && p_hat <= 1.0)) throw InvalidInput("pr_weight: p outside [0,1]");
  if (p_hat > delta) return 0.0;
  const double position_factor =
      std::pow(cfg.lambda, static_cast<double>(cfg.position - 1) / static_cast<double>(cfg.length));
  return position_factor * p_hat / (cfg.alpha + (1.0 - cfg.alpha) * p_hat);
}

// ---------------------------------------------------------------------------
// Per-token objectives

namespace detail {

inline void check_pair(const LogitVector& z, const TargetSpec& q) { q.validate(z.size()); }

inline std::size_t require_one_hot(const TargetSpec& q, const char* objective) {
  if (!q.is_one_hot()) throw UnsupportedTarget(std::string(objective) + " requires a one-hot target");
  return q.index();
}

// grad_j = scale * (r_j - q_j) with r = exp(log_r). The target entry of a
// one-hot q uses expm1 so that r_k - 1 keeps precision as r_k -> 1.
inline std::vector<double> scaled_difference(double scale, const LogProbVector& log_r, const TargetSpec& q) {
  std::vector<double> grad(log_r.size());
  if (q.is_one_hot()) {
    for (std::size_t j = 0; j < log_r.size(); ++j) grad[j] = scale * log_r.prob(j);
    grad[q.index()] = scale * std::expm1(log_r[q.index()]);
  } else {
    for (std::size_t j = 0; j < log_r.size(); ++j) grad[j] = scale * (log_r.prob(j) - q.dist()[j]);
  }
  return grad;
}

inline double expected_log(const LogProbVector& l, const TargetSpec& q) {
  if (q.is_one_hot()) return l[q.index()];
  double s = 0.0;
  for (std::size_t i = 0; i < l.size(); ++i) s += q.dist()[i] * l[i];
  return s;
}

}  // namespace detail

inline LossResult ce(const LogitVector& z, const TargetSpec& q) {
  detail::check_pair(z, q);
  const auto l = log_softmax(z);
  return {-detail::expected_log(l, q), detail::scaled_difference(1.0, l, q)};
}

inline LossResult scaled_ce(const LogitVector& z, const TargetSpec& q, Temperature beta) {
  detail::check_pair(z, q);
  const auto lb = temper_log(log_softmax(z), beta);
  return {-beta.value() * detail::expected_log(lb, q), detail::scaled_difference(1.0, lb, q)};
}

/// GEM: -E_q[log p] + E_{p^beta}[log p] with p^beta detached. Gradient p^beta - q.
inline LossResult gem(const LogitVector& z, const TargetSpec& q, Temperature beta) {
  detail::check_pair(z, q);
  const auto l = log_softmax(z);
  const auto tempered = temper_log(l, beta);
  double value = -detail::expected_log(l, q);
  for (std::size_t i = 0; i < l.size(); ++i) value += tempered.prob(i) * l[i];
  return {value, detail::scaled_difference(1.0, tempered, q)};
}

/// Focal gradient for an arbitrary target distribution:
/// grad_j = p_j sum_i q_i g(p_i) - q_j g(p_j).
inline std::vector<double> focal_general_gradient(const LogProbVector& l, std::span<const double> q,
                                                  double gamma) {
  detail::require_gamma(gamma);
  std::vector<double> weights(l.size());
  double weighted_mass = 0.0;
  for (std::size_t i = 0; i < l.size(); ++i) {
    weights[i] = focal_scaling_from_log(l[i], gamma);
    weighted_mass += q[i] * weights[i];
  }
  // Written as p_j sum_{i != j} q_i g_i + q_j g_j (p_j - 1) so the p_j - 1
  // factor can go through expm1.
  std::vector<double> grad(l.size());
  for (std::size_t j = 0; j < l.size(); ++j) {
    const double own = q[j] * weights[j];
    grad[j] = l.prob(j) * (weighted_mass - own) + own * std::expm1(l[j]);
  }
  return grad;
}

inline LossResult focal(const LogitVector& z, const TargetSpec& q, FocalConfig cfg) {
  detail::check_pair(z, q);
  detail::require_gamma(cfg.gamma);
  const auto l = log_softmax(z);
  auto focal_term = [&](std::size_t i) { return cfg.gamma == 0.0 ? 1.0 : std::pow(-std::expm1(l[i]), cfg.gamma); };
  if (q.is_one_hot()) {
    const std::size_t k = q.index();
    const double g = focal_scaling_from_log(l[k], cfg.gamma);
    return {-focal_term(k) * l[k], detail::scaled_difference(g, l, q)};
  }
  double value = 0.0;
  for (std::size_t i = 0; i < l.size(); ++i) value -= q.dist()[i] * focal_term(i) * l[i];
  return {value, focal_general_gradient(l, q.dist().values(), cfg.gamma)};
}

inline LossResult lambda_pr(const LogitVector& z, const TargetSpec& q, const PrConfig& cfg) {
  detail::check_pair(z, q);
  const std::size_t k = detail::require_one_hot(q, "lambda_pr");
  const auto l = log_softmax(z);
  const double w = pr_weight(l.prob(k), cfg);
  return {-w * l[k], detail::scaled_difference(w, l, q)};
}

/// TOFU: -g(p_hat, gamma) beta log p^beta_k with g detached and evaluated on the
/// unscaled probability. Gradient g(p_hat, gamma) (p^beta - q).
inline LossResult tofu(const LogitVector& z, const TargetSpec& q, const TofuConfig& cfg) {
  detail::check_pair(z, q);
  const std::size_t k = detail::require_one_hot(q, "tofu");
  const auto l = log_softmax(z);
  const auto lb = temper_log(l, cfg.beta);
  const double g = focal_scaling_from_log(l[k], cfg.gamma);
  return {-g * cfg.beta.value() * lb[k], detail::scaled_difference(g, lb, q)};
}

/// Focal term applied directly to tempered CE, -beta (1 - p^beta_k)^gamma log p^beta_k.
/// Its coefficient g(p_hat^beta, gamma) sees the already-tempered probability.
inline LossResult naive_tempered_focal(const LogitVector& z, const TargetSpec& q, const TofuConfig& cfg) {
  detail::check_pair(z, q);
  const std::size_t k = detail::require_one_hot(q, "naive_tempered_focal");
  detail::require_gamma(cfg.gamma);
  const auto lb = temper_log(log_softmax(z), cfg.beta);
  const double focal_term = cfg.gamma == 0.0 ? 1.0 : std::pow(-std::expm1(lb[k]), cfg.gamma);
  const double g = focal_scaling_from_log(lb[k], cfg.gamma);
  return {-cfg.beta.value() * focal_term * lb[k], detail::scaled_difference(g, lb, q)};
}

// ---------------------------------------------------------------------------
// Objective selection

enum class Objective { ce, scaled_ce, gem, focal, lambda_pr, tofu, naive_tempered_focal };

inline constexpr Objective kAllObjectives[] = {Objective::ce,        Objective::scaled_ce, Objective::gem,
                                               Objective::focal,     Objective::lambda_pr, Objective::tofu,
                                               Objective::naive_tempered_focal};

inline std::string_view to_string(Objective o) {
  switch (o) {
    case Objective::ce: return "ce";
    case Objective::scaled_ce: return "scaled_ce";
    case Objective::gem: return "gem";
    case Objective::focal: return "focal";
    case Objective::lambda_pr: return "lambda_pr";
    case Objective::tofu: return "tofu";
    case Objective::naive_tempered_focal: return "naive_tempered_focal";
  }
  return "?";
}

inline std::optional<Objective> parse_objective(std::string_view name) {
  for (Objective o : kAllObjectives) {
    if (to_string(o) == name) return o;
  }
  return std::nullopt;
}

/// Objective plus every hyperparameter any objective might read. Fields an
/// objective does not use are ignored by it.
struct LossConfig {
  Objective objective = Objective::ce;
  double beta = 1.0;
  double gamma = 0.0;
  double lambda = 1.0;
  double alpha = 0.5;

  // GEM's beta and lambda-PR's (lambda, alpha) are unverified defaults; focal
  // and TOFU use the best grid cell from the (gamma, beta) ablation.
  static LossConfig defaults(Objective o) {
    LossConfig c;
    c.objective = o;
    switch (o) {
      case Objective::ce: break;
      case Objective::scaled_ce:
      case Objective::gem: c.beta = 0.7; break;
      case Objective::focal: c.gamma = 3.0; break;
      case Objective::lambda_pr: break;
      case Objective::tofu:
      case Objective::naive_tempered_focal:
        c.gamma = 3.0;
        c.beta = 0.8;
        break;
    }
    return c;
  }

  void validate() const {
    (void)Temperature{beta};
    detail::require_gamma(gamma);
    if (objective == Objective::lambda_pr) PrConfig{lambda, alpha, 1, 1}.threshold();
  }
};

/// Dispatches one token. `position`/`length` only matter to lambda-PR.
inline LossResult evaluate(const LossConfig& cfg, const LogitVector& z, const TargetSpec& q,
                           std::size_t position = 1, std::size_t length = 1) {
  switch (cfg.objective) {
    case Objective::ce: return ce(z, q);
    case Objective::scaled_ce: return scaled_ce(z, q, Temperature{cfg.beta});
    case Objective::gem: return gem(z, q, Temperature{cfg.beta});
    case Objective::focal: return focal(z, q, FocalConfig{cfg.gamma});
    case Objective::lambda_pr: return lambda_pr(z, q, PrConfig{cfg.lambda, cfg.alpha, position, length});
    case Objective::tofu: return tofu(z, q, TofuConfig{cfg.gamma, Temperature{cfg.beta}});
    case Objective::naive_tempered_focal:
      return naive_tempered_focal(z, q, TofuConfig{cfg.gamma, Temperature{cfg.beta}});
  }
  throw ConfigError("unknown objective");
}

struct SequenceLossResult {
  double value = 0.0;
  // grads[t] is d(mean loss)/d(logits[t]); zero at masked positions.
  std::vector<std::vector<double>> grads;
  std::size_t response_tokens = 0;
};

/// Mean loss over response positions (mask true). lambda-PR positions are
/// numbered 1..L over the response positions only.
inline SequenceLossResult sequence_loss(std::span<const LogitVector> logits, std::span<const TargetSpec> targets,
                                        const std::vector<bool>& response_mask, const LossConfig& cfg) {
  if (logits.size() != targets.size() || logits.size() != response_mask.size()) {
    throw InvalidInput("sequence_loss: logits, targets and mask differ in length");
  }
  std::size_t length = 0;
  for (bool m : response_mask) length += m ? 1 : 0;
  if (length == 0) throw EmptyResponse("sequence_loss: every position is masked");

  SequenceLossResult out;
  out.response_tokens = length;
  out.grads.resize(logits.size());
  const double inv = 1.0 / static_cast<double>(length);
  std::size_t position = 0;
  for (std::size_t t = 0; t < logits.size(); ++t) {
    if (!response_mask[t]) {
      out.grads[t].assign(logits[t].size(), 0.0);
      continue;
    }
    ++position;
    auto r = evaluate(cfg, logits[t], targets[t], position, length);
    out.value += r.value * inv;
    for (double& g : r.grad) g *= inv;
    out.grads[t] = std::move(r.grad);
  }
  return out;
}

}  // namespace sftlab
