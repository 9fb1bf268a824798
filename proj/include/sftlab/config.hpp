#pragma once

// Experiment configuration files (JSON).
//
//   {
//     "objective": {"name": "tofu", "gamma": 3, "beta": 0.8},
//     "train":     {"learning_rate": 0.1, "warmup_steps": 50, "total_steps": 1000,
//                   "weight_decay": 0.01, "batch_size": 8, "momentum": 0, "seed": 1},
//     "model":     {"embed_dim": 32, "hidden_dim": 128, "context": 8, "init_seed": 1,
//                   "extra_symbols": ""},
//     "sampling":  {"top_p": 0.9, "temperature": 1, "max_tokens": 32, "seed": 1, "k": 10},
//     "data":      {"corpus": "corpus.jsonl", "init_checkpoint": "...", "prompts": "...",
//                   "answers": "..."},
//     "output_dir": "runs/x",
//     "seeds": [1, 2, 3]
//   }
//
// Every section and key is optional except data.corpus. Input paths are
// relative to the config file; output_dir is relative to the output root.
// Unknown keys are rejected.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "sftlab/error.hpp"
#include "sftlab/io.hpp"
#include "sftlab/losses.hpp"
#include "sftlab/sampling.hpp"
#include "sftlab/toy_lm.hpp"

namespace sftlab {

struct DataPaths {
  fs::path corpus;
  std::optional<fs::path> init_checkpoint;
  std::optional<fs::path> prompts;
  std::optional<fs::path> answers;
};

struct ExperimentConfig {
  TrainConfig train;  // train.objective carries the loss
  ModelShape model;
  std::optional<std::uint64_t> init_seed;  // defaults to train.seed
  std::string extra_symbols;
  SamplingConfig sampling;
  std::size_t k = 10;
  DataPaths data;
  fs::path output_dir;
  std::vector<std::uint64_t> seeds;

  std::uint64_t model_seed() const { return init_seed.value_or(train.seed); }

  /// Replicate seeds; a config without a list runs its own train seed.
  std::vector<std::uint64_t> seed_list() const { return seeds.empty() ? std::vector{train.seed} : seeds; }

  /// Same experiment re-seeded: training, init and sampling all take `seed`.
  ExperimentConfig with_seed(std::uint64_t seed) const {
    ExperimentConfig c = *this;
    c.train.seed = seed;
    c.init_seed = seed;
    c.sampling.seed = seed;
    c.seeds.clear();
    return c;
  }

  void validate() const {
    train.validate();
    sampling.validate();
    if (k == 0) throw ConfigError("sampling.k must be >= 1");
    if (model.embed_dim == 0 || model.hidden_dim == 0 || model.context == 0) {
      throw ConfigError("model dimensions must be positive");
    }
  }
};

/// Resolves an output location: absolute paths are kept, relative ones land
/// under $SFTLAB_OUTPUT_ROOT when set.
inline fs::path output_path(const fs::path& p) {
  if (p.is_absolute()) return p;
  if (const char* root = std::getenv("SFTLAB_OUTPUT_ROOT"); root != nullptr && *root != '\0') return fs::path(root) / p;
  return p;
}

namespace detail {

inline void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : obj.items()) {
    if (!allowed.contains(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read_key(const json& obj, const char* key, T& out, const std::string& where) {
  if (!obj.contains(key)) return;
  const auto& v = obj.at(key);
  if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ConfigError(where + "." + key + " must be a string");
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError(where + "." + key + " must be a number");
  } else {
    if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError(where + "." + key + " must be a non-negative integer");
  }
  out = v.get<T>();
}

inline fs::path existing_path(const json& v, const fs::path& base, const std::string& what) {
  if (!v.is_string()) throw ConfigError(what + " must be a string path");
  fs::path p = v.get<std::string>();
  if (p.is_relative()) p = base / p;
  if (!fs::exists(p)) throw ConfigError(what + " does not exist: " + p.string());
  return p;
}

}  // namespace detail

/// Parses a config document. Relative input paths resolve against `base`.
inline ExperimentConfig parse_experiment_config(const json& j, const fs::path& base) {
  detail::reject_unknown(j, {"objective", "train", "model", "sampling", "data", "output_dir", "seeds"}, "config");
  ExperimentConfig c;

  if (j.contains("objective")) {
    const auto& o = j.at("objective");
    detail::reject_unknown(o, {"name", "beta", "gamma", "lambda", "alpha"}, "objective");
    std::string name = "ce";
    detail::read_key(o, "name", name, "objective");
    const auto obj = parse_objective(name);
    if (!obj) throw ConfigError("unknown objective '" + name + "'");
    c.train.objective = LossConfig::defaults(*obj);
    detail::read_key(o, "beta", c.train.objective.beta, "objective");
    detail::read_key(o, "gamma", c.train.objective.gamma, "objective");
    detail::read_key(o, "lambda", c.train.objective.lambda, "objective");
    detail::read_key(o, "alpha", c.train.objective.alpha, "objective");
  }

  if (j.contains("train")) {
    const auto& t = j.at("train");
    detail::reject_unknown(t, {"learning_rate", "warmup_steps", "total_steps", "weight_decay", "batch_size", "momentum", "seed"},
                           "train");
    detail::read_key(t, "learning_rate", c.train.learning_rate, "train");
    detail::read_key(t, "warmup_steps", c.train.warmup_steps, "train");
    detail::read_key(t, "total_steps", c.train.total_steps, "train");
    detail::read_key(t, "weight_decay", c.train.weight_decay, "train");
    detail::read_key(t, "batch_size", c.train.batch_size, "train");
    detail::read_key(t, "momentum", c.train.momentum, "train");
    detail::read_key(t, "seed", c.train.seed, "train");
  }

  if (j.contains("model")) {
    const auto& m = j.at("model");
    detail::reject_unknown(m, {"embed_dim", "hidden_dim", "context", "init_seed", "extra_symbols"}, "model");
    detail::read_key(m, "embed_dim", c.model.embed_dim, "model");
    detail::read_key(m, "hidden_dim", c.model.hidden_dim, "model");
    detail::read_key(m, "context", c.model.context, "model");
    if (m.contains("init_seed")) {
      std::uint64_t s = 0;
      detail::read_key(m, "init_seed", s, "model");
      c.init_seed = s;
    }
    detail::read_key(m, "extra_symbols", c.extra_symbols, "model");
  }

  if (j.contains("sampling")) {
    const auto& s = j.at("sampling");
    detail::reject_unknown(s, {"top_p", "temperature", "max_tokens", "seed", "k"}, "sampling");
    detail::read_key(s, "top_p", c.sampling.top_p, "sampling");
    detail::read_key(s, "temperature", c.sampling.temperature, "sampling");
    detail::read_key(s, "max_tokens", c.sampling.max_tokens, "sampling");
    detail::read_key(s, "seed", c.sampling.seed, "sampling");
    detail::read_key(s, "k", c.k, "sampling");
  }

  if (!j.contains("data")) throw ConfigError("config needs data.corpus");
  const auto& d = j.at("data");
  detail::reject_unknown(d, {"corpus", "init_checkpoint", "prompts", "answers"}, "data");
  if (!d.contains("corpus")) throw ConfigError("config needs data.corpus");
  c.data.corpus = detail::existing_path(d.at("corpus"), base, "data.corpus");
  if (d.contains("init_checkpoint")) c.data.init_checkpoint = detail::existing_path(d.at("init_checkpoint"), base, "data.init_checkpoint");
  if (d.contains("prompts")) c.data.prompts = detail::existing_path(d.at("prompts"), base, "data.prompts");
  if (d.contains("answers")) c.data.answers = detail::existing_path(d.at("answers"), base, "data.answers");

  if (j.contains("output_dir")) {
    if (!j.at("output_dir").is_string()) throw ConfigError("output_dir must be a string");
    c.output_dir = j.at("output_dir").get<std::string>();
  }
  if (j.contains("seeds")) {
    const auto& s = j.at("seeds");
    if (!s.is_array()) throw ConfigError("seeds must be an array");
    for (const auto& v : s) {
      if (!v.is_number_integer() || v.get<long long>() < 0) throw ConfigError("seeds must be non-negative integers");
      c.seeds.push_back(v.get<std::uint64_t>());
    }
  }

  try {
    c.validate();
  } catch (const DomainError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline ExperimentConfig load_experiment_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_experiment_config(j, path.parent_path());
}

/// Only the hyperparameters the objective actually reads, so configs that
/// differ in ignored fields hash the same.
inline json objective_json(const LossConfig& o) {
  json j;
  j["name"] = to_string(o.objective);
  switch (o.objective) {
    case Objective::ce: break;
    case Objective::scaled_ce:
    case Objective::gem: j["beta"] = o.beta; break;
    case Objective::focal: j["gamma"] = o.gamma; break;
    case Objective::lambda_pr:
      j["lambda"] = o.lambda;
      j["alpha"] = o.alpha;
      break;
    case Objective::tofu:
    case Objective::naive_tempered_focal:
      j["beta"] = o.beta;
      j["gamma"] = o.gamma;
      break;
  }
  return j;
}

/// Fully resolved config with input files replaced by their content hashes
/// and the output location dropped. Keys come out sorted and numbers in
/// their shortest round-trip form, so the dump is a stable hashing input.
inline json canonical_json(const ExperimentConfig& c) {
  json j;
  j["objective"] = objective_json(c.train.objective);
  j["train"] = {{"learning_rate", c.train.learning_rate}, {"warmup_steps", c.train.warmup_steps},
                {"total_steps", c.train.total_steps},     {"weight_decay", c.train.weight_decay},
                {"batch_size", c.train.batch_size},       {"momentum", c.train.momentum},
                {"seed", c.train.seed}};
  j["model"] = {{"embed_dim", c.model.embed_dim}, {"hidden_dim", c.model.hidden_dim}, {"context", c.model.context},
                {"init_seed", c.model_seed()},    {"extra_symbols", c.extra_symbols}};
  j["sampling"] = {{"top_p", c.sampling.top_p}, {"temperature", c.sampling.temperature},
                   {"max_tokens", c.sampling.max_tokens}, {"seed", c.sampling.seed}, {"k", c.k}};
  auto hash_of = [](const std::optional<fs::path>& p) -> json {
    if (!p) return nullptr;
    return git_blob_hash(read_file(*p));
  };
  j["data"] = {{"corpus", git_blob_hash(read_file(c.data.corpus))},
               {"init_checkpoint", hash_of(c.data.init_checkpoint)},
               {"prompts", hash_of(c.data.prompts)},
               {"answers", hash_of(c.data.answers)}};
  j["seeds"] = c.seeds;
  return j;
}

inline std::string config_hash(const ExperimentConfig& c) { return sha1_hex(canonical_json(c).dump()); }

/// Starting model: the init checkpoint when given, otherwise a fresh model
/// over the corpus characters plus any extra symbols.
inline ToyModel initial_model(const ExperimentConfig& c, const Corpus& corpus) {
  if (c.data.init_checkpoint) {
    auto model = load_checkpoint(c.data.init_checkpoint->string()).model;
    try {
      corpus.validate(model.vocab);
    } catch (const TokenizationError& e) {
      throw ConfigError(std::string("vocab mismatch with init checkpoint: ") + e.what());
    }
    return model;
  }
  auto texts = corpus.texts();
  texts.push_back(c.extra_symbols);
  return ToyModel::init(Vocab::from_texts(texts), c.model, c.model_seed());
}

}  // namespace sftlab
