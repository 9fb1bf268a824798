#pragma once

// Finite-difference oracle and the equivalence checks built on it.
//
// The oracle never calls into the closed-form gradient code: the value
// functions below are rebuilt from log_softmax / temper_log, and every
// detached quantity (p^beta in GEM, g in TOFU, w in lambda-PR) is evaluated
// once at the base point and then held fixed while the logits are perturbed.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "sftlab/error.hpp"
#include "sftlab/losses.hpp"
#include "sftlab/numeric.hpp"

namespace sftlab {

struct FiniteDiffSpec {
  double step = 1e-5;
  double tolerance = 1e-5;

  void validate() const {
    if (!(step > 0.0) || !(tolerance > 0.0)) throw DomainError("FiniteDiffSpec: step and tolerance must be > 0");
  }
};

using ValueFn = std::function<double(const LogitVector&)>;

/// Central differences (f(z + h e_j) - f(z - h e_j)) / 2h for every component.
inline std::vector<double> fd_gradient(const ValueFn& value_fn, const LogitVector& z, const FiniteDiffSpec& spec) {
  spec.validate();
  std::vector<double> base(z.values().begin(), z.values().end());
  std::vector<double> grad(z.size());
  for (std::size_t j = 0; j < z.size(); ++j) {
    auto plus = base;
    auto minus = base;
    plus[j] += spec.step;
    minus[j] -= spec.step;
    const double fp = value_fn(LogitVector(std::move(plus)));
    const double fm = value_fn(LogitVector(std::move(minus)));
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw OracleFailure("fd_gradient: non-finite evaluation at component " + std::to_string(j), j);
    }
    grad[j] = (fp - fm) / (2.0 * spec.step);
  }
  return grad;
}

/// max_j |a_j - b_j| / (max_j |b_j| + 1e-12), with b the reference.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0;
  double scale = 0.0;
  for (std::size_t j = 0; j < b.size(); ++j) {
    diff = std::max(diff, std::abs(a[j] - b[j]));
    scale = std::max(scale, std::abs(b[j]));
  }
  return diff / (scale + 1e-12);
}

/// Value of `cfg.objective` as a function of the logits, with every detached
/// quantity frozen at its value at `z0`.
inline ValueFn frozen_value_fn(const LossConfig& cfg, const LogitVector& z0, const TargetSpec& q,
                               std::size_t position = 1, std::size_t length = 1) {
  const std::size_t vocab = z0.size();
  const std::vector<double> qd = q.dense(vocab);
  const double beta = cfg.beta;
  const double gamma = cfg.gamma;
  auto cross = [qd](const LogProbVector& l) {
    double s = 0.0;
    for (std::size_t i = 0; i < l.size(); ++i) s += qd[i] * l[i];
    return s;
  };

  switch (cfg.objective) {
    case Objective::ce:
      return [cross](const LogitVector& z) { return -cross(log_softmax(z)); };
    case Objective::scaled_ce:
      return [cross, beta](const LogitVector& z) {
        return -beta * cross(temper_log(log_softmax(z), Temperature{beta}));
      };
    case Objective::gem: {
      const auto frozen = temper_log(log_softmax(z0), Temperature{beta}).probs_raw();
      return [cross, frozen](const LogitVector& z) {
        const auto l = log_softmax(z);
        double v = -cross(l);
        for (std::size_t i = 0; i < l.size(); ++i) v += frozen[i] * l[i];
        return v;
      };
    }
    case Objective::focal:
      return [qd, gamma](const LogitVector& z) {
        const auto l = log_softmax(z);
        double v = 0.0;
        for (std::size_t i = 0; i < l.size(); ++i) {
          if (qd[i] != 0.0) v -= qd[i] * std::pow(-std::expm1(l[i]), gamma) * l[i];
        }
        return v;
      };
    case Objective::lambda_pr: {
      const std::size_t k = q.index();
      const double p0 = std::exp(log_softmax(z0)[k]);
      const double root = std::pow(cfg.lambda, 1.0 / static_cast<double>(length));
      const double delta = cfg.alpha * root / (1.0 - (1.0 - cfg.alpha) * root);
      double w = 0.0;
      if (p0 <= delta + 1e-12) {
        w = std::pow(cfg.lambda, static_cast<double>(position - 1) / static_cast<double>(length)) * p0 /
            (cfg.alpha + (1.0 - cfg.alpha) * p0);
      }
      return [k, w](const LogitVector& z) { return -w * log_softmax(z)[k]; };
    }
    case Objective::tofu: {
      const std::size_t k = q.index();
      const double l0 = log_softmax(z0)[k];
      const double p0 = std::exp(l0);
      const double one_minus = -std::expm1(l0);
      double g = 1.0;
      if (gamma != 0.0) {
        g = one_minus > 0.0 ? std::pow(one_minus, gamma) - gamma * p0 * std::pow(one_minus, gamma - 1.0) * l0 : 0.0;
      }
      return [k, g, beta](const LogitVector& z) {
        return -g * beta * temper_log(log_softmax(z), Temperature{beta})[k];
      };
    }
    case Objective::naive_tempered_focal: {
      const std::size_t k = q.index();
      return [k, gamma, beta](const LogitVector& z) {
        const double lb = temper_log(log_softmax(z), Temperature{beta})[k];
        return -beta * std::pow(-std::expm1(lb), gamma) * lb;
      };
    }
  }
  throw ConfigError("frozen_value_fn: unknown objective");
}

// ---------------------------------------------------------------------------
// Reports

struct Counterexample {
  std::vector<double> logits;
  std::vector<double> target;  // dense q
  double beta = 1.0;
  double gamma = 0.0;
  std::string detail;
};

/// One measured quantity of a check; passes iff value <= tolerance.
struct Measure {
  std::string name;
  double value = 0.0;
  double tolerance = 0.0;
  bool pass() const { return value <= tolerance; }
};

struct CheckReport {
  std::string name;
  std::size_t trials = 0;
  std::vector<Measure> measures;
  std::optional<Counterexample> counterexample;

  bool pass() const {
    return std::all_of(measures.begin(), measures.end(), [](const Measure& m) { return m.pass(); });
  }
  // Largest measured value; every measure is an error or a failure count.
  double max_rel_error() const {
    double e = 0.0;
    for (const auto& m : measures) e = std::max(e, m.value);
    return e;
  }
};

namespace detail {

struct MeasureTracker {
  Measure measure;
  std::optional<Counterexample> first_failure;

  void record(double value, const auto& make_counterexample) {
    const bool was_ok = measure.pass();
    measure.value = std::max(measure.value, value);
    if (was_ok && !measure.pass() && !first_failure) first_failure = make_counterexample();
  }
};

inline CheckReport assemble(std::string name, std::size_t trials, std::vector<MeasureTracker>& trackers) {
  CheckReport r{std::move(name), trials, {}, std::nullopt};
  for (auto& t : trackers) {
    r.measures.push_back(t.measure);
    if (!r.counterexample && t.first_failure) r.counterexample = t.first_failure;
  }
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Random trials

struct Trial {
  std::vector<double> logits;
  std::size_t target = 0;
  double scale = 1.0;
  double beta = 1.0;
  double gamma = 0.0;
  double lambda = 1.0;
  double alpha = 0.5;
  std::size_t position = 1;
  std::size_t length = 1;
  std::vector<double> soft_target;  // random distribution over the same vocab

  LogitVector z() const { return LogitVector(logits); }
  bool uniform() const {
    return std::all_of(logits.begin(), logits.end(), [&](double v) { return v == logits.front(); });
  }
};

/// Deterministic trial stream covering V in {2,3,16,64}, logit scales
/// {0.1,1,10}, beta in {0.5,...,1.0} and gamma in {0,1,2,3,5}.
class TrialGenerator {
 public:
  explicit TrialGenerator(std::uint64_t seed) : rng_(seed) {}

  Trial next() {
    static constexpr std::size_t kVocab[] = {2, 3, 16, 64};
    static constexpr double kScale[] = {0.1, 1.0, 10.0};
    static constexpr double kBeta[] = {0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
    static constexpr double kGamma[] = {0.0, 1.0, 2.0, 3.0, 5.0};
    static constexpr double kLambda[] = {0.5, 0.8, 1.0};
    static constexpr double kAlpha[] = {0.1, 0.5, 1.0};

    Trial t;
    const std::size_t v = pick(kVocab);
    t.scale = pick(kScale);
    t.beta = pick(kBeta);
    t.gamma = pick(kGamma);
    t.lambda = pick(kLambda);
    t.alpha = pick(kAlpha);
    t.length = 1 + index(8);
    t.position = 1 + index(t.length);
    t.target = index(v);
    std::normal_distribution<double> normal(0.0, t.scale);
    t.logits.resize(v);
    for (double& x : t.logits) x = normal(rng_);
    std::exponential_distribution<double> expo(1.0);
    double total = 0.0;
    t.soft_target.resize(v);
    for (double& x : t.soft_target) total += (x = expo(rng_));
    for (double& x : t.soft_target) x /= total;
    return t;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng_); }
  template <typename T, std::size_t N>
  T pick(const T (&options)[N]) {
    return options[index(N)];
  }

  std::mt19937_64 rng_;
};

namespace detail {

inline Counterexample counterexample_of(const Trial& t, std::vector<double> q, std::string detail) {
  return {t.logits, std::move(q), t.beta, t.gamma, std::move(detail)};
}

inline std::vector<double> scaled(std::vector<double> v, double s) {
  for (double& x : v) x *= s;
  return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Equivalence checks

/// gem grad == scaled_ce grad, and both match the oracle on the GEM value with
/// p^beta frozen.
inline CheckReport verify_theorem_gem(std::size_t trials, std::uint64_t seed, FiniteDiffSpec fd = {}) {
  TrialGenerator gen(seed);
  std::vector<detail::MeasureTracker> m = {{{"gem_vs_scaled_ce", 0.0, 1e-12}, {}},
                                           {{"gem_vs_oracle", 0.0, fd.tolerance}, {}},
                                           {{"scaled_ce_vs_oracle", 0.0, fd.tolerance}, {}}};
  for (std::size_t i = 0; i < trials; ++i) {
    const Trial t = gen.next();
    const auto z = t.z();
    const auto q = TargetSpec::one_hot(t.target);
    const Temperature beta{t.beta};
    const auto a = gem(z, q, beta).grad;
    const auto b = scaled_ce(z, q, beta).grad;
    LossConfig cfg = LossConfig::defaults(Objective::gem);
    cfg.beta = t.beta;
    const auto oracle = fd_gradient(frozen_value_fn(cfg, z, q), z, fd);
    auto cx = [&](const char* what) { return [&, what] { return detail::counterexample_of(t, q.dense(z.size()), what); }; };
    m[0].record(relative_error(a, b), cx("gem grad differs from scaled_ce grad"));
    m[1].record(relative_error(oracle, a), cx("gem grad differs from finite differences"));
    m[2].record(relative_error(oracle, b), cx("scaled_ce grad differs from finite differences"));
  }
  return detail::assemble("theorem_gem_equals_scaled_ce", trials, m);
}

/// One-hot focal grad == g(p_hat, gamma) * ce grad (both the one-hot closed
/// form and the general-q expansion), oracle agreement, and a soft-target
/// witness whose componentwise ratios focal/ce are not all equal.
inline CheckReport verify_prop_focal(std::size_t trials, std::uint64_t seed, FiniteDiffSpec fd = {}) {
  TrialGenerator gen(seed);
  std::vector<detail::MeasureTracker> m = {{{"focal_vs_g_times_ce", 0.0, 1e-10}, {}},
                                           {{"general_expansion_vs_g_times_ce", 0.0, 1e-10}, {}},
                                           {{"focal_vs_oracle", 0.0, fd.tolerance}, {}},
                                           {{"soft_focal_vs_oracle", 0.0, fd.tolerance}, {}}};
  double best_spread = 0.0;
  for (std::size_t i = 0; i < trials; ++i) {
    const Trial t = gen.next();
    const auto z = t.z();
    const auto q = TargetSpec::one_hot(t.target);
    const auto l = log_softmax(z);
    const auto focal_grad = focal(z, q, FocalConfig{t.gamma}).grad;
    const auto reference = detail::scaled(ce(z, q).grad, focal_scaling_from_log(l[t.target], t.gamma));
    const auto general = focal_general_gradient(l, q.dense(z.size()), t.gamma);
    LossConfig cfg = LossConfig::defaults(Objective::focal);
    cfg.gamma = t.gamma;
    const auto oracle = fd_gradient(frozen_value_fn(cfg, z, q), z, fd);
    auto cx = [&](const char* what) { return [&, what] { return detail::counterexample_of(t, q.dense(z.size()), what); }; };
    m[0].record(relative_error(focal_grad, reference), cx("focal grad is not g * ce grad"));
    m[1].record(relative_error(general, reference), cx("general-q expansion disagrees on a one-hot target"));
    m[2].record(relative_error(oracle, focal_grad), cx("focal grad differs from finite differences"));

    const auto soft = TargetSpec::soft(ProbVector(t.soft_target));
    const auto soft_grad = focal(z, soft, FocalConfig{t.gamma}).grad;
    const auto soft_oracle = fd_gradient(frozen_value_fn(cfg, z, soft), z, fd);
    m[3].record(relative_error(soft_oracle, soft_grad), [&] {
      return detail::counterexample_of(t, t.soft_target, "soft focal grad differs from finite differences");
    });

    if (t.gamma > 0.0 && z.size() >= 3) {
      const auto ce_soft = ce(z, soft).grad;
      double lo = std::numeric_limits<double>::infinity();
      double hi = -lo;
      for (std::size_t j = 0; j < z.size(); ++j) {
        if (std::abs(ce_soft[j]) < 1e-8) continue;
        const double ratio = soft_grad[j] / ce_soft[j];
        lo = std::min(lo, ratio);
        hi = std::max(hi, ratio);
      }
      if (hi > lo) best_spread = std::max(best_spread, hi - lo);
    }
  }
  auto report = detail::assemble("prop_focal_scales_ce", trials, m);
  // Non-proportionality witness: some soft target whose focal/ce ratios
  // spread by more than 1e-3 across components.
  report.measures.push_back({"soft_witness_missing", best_spread > 1e-3 ? 0.0 : 1.0, 0.0});
  return report;
}

/// TOFU grad == g(p_hat) (p^beta - q); naive tempered focal grad ==
/// g(p_hat^beta) (p^beta - q); the two coefficients differ whenever
/// beta < 1, gamma > 0 and the logits are not uniform.
inline CheckReport verify_cor_tofu(std::size_t trials, std::uint64_t seed, FiniteDiffSpec fd = {}) {
  TrialGenerator gen(seed);
  std::vector<detail::MeasureTracker> m = {{{"tofu_vs_g_times_scaled_ce", 0.0, 1e-12}, {}},
                                           {{"naive_vs_g_tempered_times_scaled_ce", 0.0, 1e-12}, {}},
                                           {{"tofu_vs_oracle", 0.0, fd.tolerance}, {}},
                                           {{"naive_vs_oracle", 0.0, fd.tolerance}, {}},
                                           {{"coincident_trials", 0.0, 0.0}, {}}};
  for (std::size_t i = 0; i < trials; ++i) {
    const Trial t = gen.next();
    const auto z = t.z();
    const auto q = TargetSpec::one_hot(t.target);
    const Temperature beta{t.beta};
    const TofuConfig cfg{t.gamma, beta};
    const auto l = log_softmax(z);
    const auto lb = temper_log(l, beta);
    const auto base = scaled_ce(z, q, beta).grad;
    const auto tofu_grad = tofu(z, q, cfg).grad;
    const auto naive_grad = naive_tempered_focal(z, q, cfg).grad;
    auto cx = [&](const char* what) { return [&, what] { return detail::counterexample_of(t, q.dense(z.size()), what); }; };
    m[0].record(relative_error(tofu_grad, detail::scaled(base, focal_scaling_from_log(l[t.target], t.gamma))),
                cx("tofu grad is not g(p) * scaled_ce grad"));
    m[1].record(relative_error(naive_grad, detail::scaled(base, focal_scaling_from_log(lb[t.target], t.gamma))),
                cx("naive grad is not g(p^beta) * scaled_ce grad"));

    LossConfig lc = LossConfig::defaults(Objective::tofu);
    lc.beta = t.beta;
    lc.gamma = t.gamma;
    m[2].record(relative_error(fd_gradient(frozen_value_fn(lc, z, q), z, fd), tofu_grad),
                cx("tofu grad differs from finite differences"));
    lc.objective = Objective::naive_tempered_focal;
    m[3].record(relative_error(fd_gradient(frozen_value_fn(lc, z, q), z, fd), naive_grad),
                cx("naive grad differs from finite differences"));

    if (t.beta <= 0.9 && t.gamma > 0.0 && !t.uniform()) {
      // The gradients share the direction p^beta - q, so they differ exactly
      // when the coefficients do. Compare g and 1 - g so that coefficients
      // rounding to 1 (p -> 0) are still told apart.
      const double lk = l[t.target];
      const double lbk = lb[t.target];
      const bool differ = focal_scaling_from_log(lk, t.gamma) != focal_scaling_from_log(lbk, t.gamma) ||
                          focal_scaling_complement_from_log(lk, t.gamma) !=
                              focal_scaling_complement_from_log(lbk, t.gamma);
      if (!differ) {
        m[4].record(m[4].measure.value + 1.0, cx("tofu and naive coefficients coincide"));
      }
    }
  }
  return detail::assemble("cor_tofu_vs_naive_tempered_focal", trials, m);
}

/// Default min-probability grid: 1e-1, 1e-2, ..., 1e-300.
inline std::vector<double> default_min_prob_grid() {
  std::vector<double> grid;
  for (int e = 1; e <= 300; ++e) grid.push_back(std::pow(10.0, -e));
  return grid;
}

/// Entropy logit-gradient of [1 - eps, eps] stays finite as eps -> 0 and its
/// eps component shrinks monotonically below eps = 1e-3, ending under 1e-8.
inline CheckReport verify_entropy_bounded(const std::vector<double>& min_prob_grid = default_min_prob_grid()) {
  std::size_t non_finite = 0;
  std::size_t non_monotone = 0;
  double previous = std::numeric_limits<double>::infinity();
  double last = std::numeric_limits<double>::infinity();
  std::optional<Counterexample> cx;
  double oracle_err = 0.0;
  for (double eps : min_prob_grid) {
    const LogitVector z({std::log1p(-eps), std::log(eps)});
    const auto grad = entropy_logit_gradient(log_softmax(z));
    if (!std::isfinite(grad[0]) || !std::isfinite(grad[1])) {
      ++non_finite;
      if (!cx) cx = Counterexample{{z[0], z[1]}, {}, 1.0, 0.0, "non-finite entropy gradient"};
      continue;
    }
    const double mag = std::abs(grad[1]);
    if (eps <= 1e-3) {
      if (!(mag < previous)) {
        ++non_monotone;
        if (!cx) cx = Counterexample{{z[0], z[1]}, {}, 1.0, 0.0, "vanishing component did not shrink"};
      }
      previous = mag;
    }
    last = mag;
    if (eps >= 1e-6) {
      const auto oracle = fd_gradient([](const LogitVector& x) { return entropy(log_softmax(x)); }, z, {});
      oracle_err = std::max(oracle_err, relative_error(oracle, grad));
    }
  }
  CheckReport r{"entropy_gradient_bounded", min_prob_grid.size(), {}, cx};
  r.measures = {{"non_finite_points", static_cast<double>(non_finite), 0.0},
                {"non_monotone_points", static_cast<double>(non_monotone), 0.0},
                {"final_vanishing_magnitude", last, 1e-8},
                {"entropy_vs_oracle", oracle_err, 1e-6}};
  return r;
}

/// Every objective's closed-form gradient against the oracle, `trials` per
/// objective. Objectives that accept soft targets get one on odd trials.
inline CheckReport verify_fd_suite(std::size_t trials, std::uint64_t seed, FiniteDiffSpec fd = {},
                                   std::span<const Objective> objectives = kAllObjectives) {
  std::vector<detail::MeasureTracker> m;
  for (Objective o : objectives) m.push_back({{std::string(to_string(o)) + "_vs_oracle", 0.0, fd.tolerance}, {}});
  for (std::size_t oi = 0; oi < objectives.size(); ++oi) {
    const Objective o = objectives[oi];
    const bool soft_ok = o == Objective::ce || o == Objective::scaled_ce || o == Objective::gem || o == Objective::focal;
    TrialGenerator gen(seed + 0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(o) + 1));
    for (std::size_t i = 0; i < trials; ++i) {
      const Trial t = gen.next();
      const auto z = t.z();
      const auto q = soft_ok && (i % 2 == 1) ? TargetSpec::soft(ProbVector(t.soft_target)) : TargetSpec::one_hot(t.target);
      LossConfig cfg{o, t.beta, t.gamma, t.lambda, t.alpha};
      const auto analytic = evaluate(cfg, z, q, t.position, t.length).grad;
      const auto oracle = fd_gradient(frozen_value_fn(cfg, z, q, t.position, t.length), z, fd);
      m[oi].record(relative_error(oracle, analytic), [&] {
        return detail::counterexample_of(t, q.dense(z.size()), std::string(to_string(o)) + " grad differs from finite differences");
      });
    }
  }
  return detail::assemble("fd_oracle_all_objectives", trials, m);
}

}  // namespace sftlab
