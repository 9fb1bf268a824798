#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "sftlab/error.hpp"
#include "sftlab/numeric.hpp"
#include "sftlab/toy_lm.hpp"

namespace sftlab {

struct SamplingConfig {
  double top_p = 0.9;
  double temperature = 1.0;
  std::size_t max_tokens = 32;
  std::uint64_t seed = 1;

  void validate() const {
    if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must lie in (0, 1]");
    if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("temperature must be > 0");
  }
};

struct NucleusEntry {
  TokenId token;
  double prob;
};

/// Smallest descending-probability prefix whose mass reaches `top_p` (the
/// token crossing the threshold is included), renormalized. Ties are broken
/// by token id.
inline std::vector<NucleusEntry> nucleus(const LogProbVector& l, double top_p) {
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must lie in (0, 1]");
  std::vector<NucleusEntry> all(l.size());
  for (std::size_t i = 0; i < l.size(); ++i) all[i] = {static_cast<TokenId>(i), l.prob(i)};
  std::stable_sort(all.begin(), all.end(), [](const NucleusEntry& a, const NucleusEntry& b) { return a.prob > b.prob; });

  double mass = 0.0;
  std::size_t keep = 0;
  while (keep < all.size()) {
    mass += all[keep++].prob;
    if (mass >= top_p - 1e-12) break;
  }
  all.resize(keep);
  for (auto& e : all) e.prob /= mass;
  return all;
}

/// Inverse-CDF draw from a nucleus with u in [0, 1).
inline TokenId draw(const std::vector<NucleusEntry>& nuc, double u) {
  double cum = 0.0;
  for (const auto& e : nuc) {
    cum += e.prob;
    if (u < cum) return e.token;
  }
  return nuc.back().token;
}

/// Temperature-scaled next-token log-probabilities log softmax(z / T).
inline LogProbVector tempered_next_token(const LogitVector& z, double temperature) {
  std::vector<double> scaled(z.values().begin(), z.values().end());
  for (double& x : scaled) x /= temperature;
  return log_softmax(LogitVector(std::move(scaled)));
}

/// Samples a continuation of `prompt` until EOS or `max_tokens`. The returned
/// tokens exclude the EOS.
inline std::vector<TokenId> nucleus_sample(const ToyModel& m, std::span<const TokenId> prompt, const SamplingConfig& cfg,
                                           std::mt19937_64& rng) {
  cfg.validate();
  std::vector<TokenId> history(prompt.begin(), prompt.end());
  std::vector<TokenId> out;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  while (out.size() < cfg.max_tokens) {
    const auto nuc = nucleus(tempered_next_token(forward(m, history), cfg.temperature), cfg.top_p);
    const TokenId next = draw(nuc, unit(rng));
    if (next == Vocab::kEos) break;
    out.push_back(next);
    history.push_back(next);
  }
  return out;
}

inline std::vector<TokenId> nucleus_sample(const ToyModel& m, std::span<const TokenId> prompt, const SamplingConfig& cfg) {
  std::mt19937_64 rng(cfg.seed);
  return nucleus_sample(m, prompt, cfg, rng);
}

/// Independent per-completion seed derived from (base seed, prompt id, index).
inline std::uint64_t completion_seed(std::uint64_t base_seed, std::string_view prompt_id, std::size_t index) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix_byte = [&h](unsigned char b) {
    h ^= b;
    h *= 0x100000001b3ULL;
  };
  for (int i = 0; i < 8; ++i) mix_byte(static_cast<unsigned char>(base_seed >> (8 * i)));
  for (char ch : prompt_id) mix_byte(static_cast<unsigned char>(ch));
  mix_byte(0xff);
  for (int i = 0; i < 8; ++i) mix_byte(static_cast<unsigned char>(static_cast<std::uint64_t>(index) >> (8 * i)));
  // splitmix64 finalizer
  h ^= h >> 30;
  h *= 0xbf58476d1ce4e5b9ULL;
  h ^= h >> 27;
  h *= 0x94d049bb133111ebULL;
  h ^= h >> 31;
  return h;
}

}  // namespace sftlab
