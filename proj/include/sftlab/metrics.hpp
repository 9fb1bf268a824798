#pragma once

// Diversity and quality metrics over sampled completions.
//
// Self-BLEU and distinct-n work on words: completions are lowercased and split
// on whitespace. distinct-n is a surface-level proxy, not a semantic
// novelty score.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "sftlab/error.hpp"
#include "sftlab/numeric.hpp"

namespace sftlab {

struct GenerationSet {
  std::string prompt_id;
  std::string prompt;
  std::vector<std::string> completions;
};

inline std::vector<std::string> words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

namespace detail {

using Ngram = std::vector<std::string>;

inline std::map<Ngram, std::size_t> ngram_counts(const std::vector<std::string>& w, std::size_t n) {
  std::map<Ngram, std::size_t> counts;
  for (std::size_t i = 0; i + n <= w.size(); ++i) ++counts[Ngram(w.begin() + i, w.begin() + i + n)];
  return counts;
}

}  // namespace detail

struct BleuOptions {
  std::size_t max_n = 4;
  double epsilon = 1e-9;  // added to zero numerators of order > 1
};

/// Sentence BLEU in [0, 1] with uniform weights over 1..max_n, clipped counts
/// against the per-n-gram maximum over references, and the brevity penalty
/// against the closest reference length (shorter wins ties).
inline double sentence_bleu(const std::vector<std::string>& hyp, const std::vector<std::vector<std::string>>& refs,
                            const BleuOptions& opt = {}) {
  if (refs.empty()) throw ArityError("sentence_bleu: no references");
  if (hyp.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= opt.max_n; ++n) {
    const auto hyp_counts = detail::ngram_counts(hyp, n);
    std::map<detail::Ngram, std::size_t> max_ref;
    for (const auto& r : refs) {
      for (const auto& [g, c] : detail::ngram_counts(r, n)) max_ref[g] = std::max(max_ref[g], c);
    }
    double matched = 0.0;
    double total = 0.0;
    for (const auto& [g, c] : hyp_counts) {
      total += static_cast<double>(c);
      const auto it = max_ref.find(g);
      if (it != max_ref.end()) matched += static_cast<double>(std::min(c, it->second));
    }
    if (matched == 0.0) {
      if (n == 1) return 0.0;
      matched = opt.epsilon;
    }
    log_sum += std::log(matched / std::max(1.0, total));
  }

  const double c = static_cast<double>(hyp.size());
  double r = 0.0;
  double best = std::numeric_limits<double>::infinity();
  for (const auto& ref : refs) {
    const double len = static_cast<double>(ref.size());
    const double d = std::abs(len - c);
    if (d < best || (d == best && len < r)) {
      best = d;
      r = len;
    }
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  return bp * std::exp(log_sum / static_cast<double>(opt.max_n));
}

/// Mean BLEU of each completion against all the others, scaled to [0, 100].
inline double self_bleu(std::span<const std::string> completions, const BleuOptions& opt = {}) {
  if (completions.size() < 2) throw ArityError("self_bleu needs at least 2 completions");
  std::vector<std::vector<std::string>> tok;
  for (const auto& c : completions) tok.push_back(words(c));
  double total = 0.0;
  for (std::size_t i = 0; i < tok.size(); ++i) {
    std::vector<std::vector<std::string>> refs;
    for (std::size_t j = 0; j < tok.size(); ++j) {
      if (j != i) refs.push_back(tok[j]);
    }
    total += sentence_bleu(tok[i], refs, opt);
  }
  return 100.0 * total / static_cast<double>(tok.size());
}

inline double self_bleu(const GenerationSet& set, const BleuOptions& opt = {}) { return self_bleu(set.completions, opt); }

/// Unique word n-grams across all completions divided by the total count.
inline double distinct_n(std::span<const std::string> completions, std::size_t n) {
  if (completions.empty()) throw ArityError("distinct_n needs at least 1 completion");
  if (n == 0) throw ConfigError("distinct_n: n must be >= 1");
  std::set<detail::Ngram> unique;
  std::size_t total = 0;
  for (const auto& c : completions) {
    const auto w = words(c);
    for (std::size_t i = 0; i + n <= w.size(); ++i) {
      unique.insert(detail::Ngram(w.begin() + i, w.begin() + i + n));
      ++total;
    }
  }
  if (total == 0) throw UndefinedMetric("distinct_n: no completion has " + std::to_string(n) + " words");
  return static_cast<double>(unique.size()) / static_cast<double>(total);
}

/// Shannon entropy in nats.
inline double answer_entropy(const ProbVector& p) {
  double h = 0.0;
  for (double x : p.values()) {
    if (x > 0.0) h -= x * std::log(x);
  }
  return h;
}

/// Empirical distribution of distinct completion strings.
inline ProbVector completion_distribution(std::span<const std::string> completions) {
  if (completions.empty()) throw ArityError("completion_distribution: no completions");
  std::map<std::string, double> counts;
  for (const auto& c : completions) counts[c] += 1.0;
  std::vector<double> p;
  for (const auto& [c, n] : counts) p.push_back(n / static_cast<double>(completions.size()));
  return ProbVector(std::move(p));
}

struct Coverage {
  double coverage = 0.0;      // fraction of problems with at least one success
  double mean_success = 0.0;  // fraction of all samples that succeed
};

/// `success[i][j]` is whether sample j of problem i was correct.
inline Coverage coverage_and_mean(const std::vector<std::vector<bool>>& success) {
  if (success.empty()) throw ArityError("coverage_and_mean: no problems");
  std::size_t covered = 0;
  std::size_t hits = 0;
  std::size_t samples = 0;
  for (const auto& row : success) {
    if (row.empty()) throw ArityError("coverage_and_mean: problem with no samples");
    if (row.size() != success.front().size()) throw ArityError("coverage_and_mean: every problem needs the same k");
    const auto n = static_cast<std::size_t>(std::count(row.begin(), row.end(), true));
    covered += n > 0 ? 1 : 0;
    hits += n;
    samples += row.size();
  }
  return {static_cast<double>(covered) / static_cast<double>(success.size()),
          static_cast<double>(hits) / static_cast<double>(samples)};
}

/// Contents of the last \boxed{...} with balanced braces, if any.
inline std::optional<std::string> extract_boxed_answer(std::string_view text) {
  static constexpr std::string_view kOpen = "\\boxed{";
  const auto start = text.rfind(kOpen);
  if (start == std::string_view::npos) return std::nullopt;
  int depth = 1;
  for (std::size_t i = start + kOpen.size(); i < text.size(); ++i) {
    if (text[i] == '{') {
      ++depth;
    } else if (text[i] == '}' && --depth == 0) {
      return std::string(text.substr(start + kOpen.size(), i - start - kOpen.size()));
    }
  }
  return std::nullopt;
}

/// Per-prompt values plus their mean and (population) standard deviation.
struct MetricReport {
  std::string metric;
  std::vector<std::pair<std::string, double>> per_prompt;
  double mean = 0.0;
  double stddev = 0.0;

  static MetricReport from(std::string metric, std::vector<std::pair<std::string, double>> rows) {
    MetricReport r{std::move(metric), std::move(rows), 0.0, 0.0};
    if (r.per_prompt.empty()) return r;
    const double n = static_cast<double>(r.per_prompt.size());
    for (const auto& [id, v] : r.per_prompt) r.mean += v / n;
    double var = 0.0;
    for (const auto& [id, v] : r.per_prompt) var += (v - r.mean) * (v - r.mean) / n;
    r.stddev = std::sqrt(var);
    return r;
  }
};

}  // namespace sftlab
