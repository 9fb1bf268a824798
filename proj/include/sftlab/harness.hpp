#pragma once

// Experiment drivers behind the command-line tool. Each run_* function does
// the work and writes its artifacts; the CLI layer only parses arguments and
// maps exceptions to exit codes.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "sftlab/config.hpp"
#include "sftlab/error.hpp"
#include "sftlab/gradcheck.hpp"
#include "sftlab/io.hpp"
#include "sftlab/losses.hpp"
#include "sftlab/metrics.hpp"
#include "sftlab/sampling.hpp"
#include "sftlab/toy_lm.hpp"

namespace sftlab {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// Median of the finite values; NaN when there are none.
inline double median(std::vector<double> v) {
  std::erase_if(v, [](double x) { return !std::isfinite(x); });
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------
// Run records

struct RunRecord {
  json invocation;  // command name plus the arguments that reproduce it
  std::string config_hash;
  std::string corpus_hash;
  json canonical_config;
  std::vector<std::string> outputs;
  double wall_clock_seconds = 0.0;
  std::string status = "ok";
  std::string message;

  json to_json() const {
    json j;
    j["invocation"] = invocation;
    j["config_hash"] = config_hash.empty() ? json(nullptr) : json(config_hash);
    j["corpus_hash"] = corpus_hash.empty() ? json(nullptr) : json(corpus_hash);
    j["canonical_config"] = canonical_config;
    j["outputs"] = outputs;
    j["wall_clock_seconds"] = wall_clock_seconds;
    j["status"] = status;
    j["message"] = message;
    return j;
  }

  void write(const fs::path& dir) const { write_file(dir / "run_record.json", to_json().dump(2) + "\n"); }
};

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckOptions {
  std::size_t trials = 1000;
  std::uint64_t seed = 1;
  std::optional<Objective> objective;  // restricts the finite-difference suite
  FiniteDiffSpec fd;
};

inline std::vector<CheckReport> run_gradcheck(const GradcheckOptions& opt) {
  std::vector<CheckReport> out;
  out.push_back(verify_theorem_gem(opt.trials, opt.seed, opt.fd));
  out.push_back(verify_prop_focal(opt.trials, opt.seed, opt.fd));
  out.push_back(verify_cor_tofu(opt.trials, opt.seed, opt.fd));
  out.push_back(verify_entropy_bounded());
  if (opt.objective) {
    const Objective only[] = {*opt.objective};
    out.push_back(verify_fd_suite(opt.trials, opt.seed, opt.fd, only));
  } else {
    out.push_back(verify_fd_suite(opt.trials, opt.seed, opt.fd));
  }
  return out;
}

inline json to_json(const CheckReport& r) {
  json j;
  j["check"] = r.name;
  j["trials"] = r.trials;
  j["pass"] = r.pass();
  j["max_rel_error"] = r.max_rel_error();
  j["measures"] = json::array();
  for (const auto& m : r.measures) {
    j["measures"].push_back({{"name", m.name}, {"value", m.value}, {"tolerance", m.tolerance}, {"pass", m.pass()}});
  }
  if (r.counterexample) {
    const auto& c = *r.counterexample;
    j["counterexample"] = {{"logits", c.logits}, {"target", c.target}, {"beta", c.beta}, {"gamma", c.gamma}, {"detail", c.detail}};
  } else {
    j["counterexample"] = nullptr;
  }
  return j;
}

// ---------------------------------------------------------------------------
// train

struct TrainOutcome {
  TrainResult result;
  std::string config_hash;
  std::string corpus_hash;
};

/// Trains from the config and writes checkpoint.bin, loss_trace.csv and
/// run_record.json into `out_dir`. A diverged run leaves only a record with
/// status "diverged".
inline TrainOutcome run_train(const ExperimentConfig& cfg, const fs::path& out_dir, const json& invocation) {
  Stopwatch clock;
  RunRecord rec;
  rec.invocation = invocation;
  rec.canonical_config = canonical_json(cfg);
  rec.config_hash = sha1_hex(rec.canonical_config.dump());
  rec.corpus_hash = git_blob_hash(read_file(cfg.data.corpus));

  const Corpus corpus = read_corpus(cfg.data.corpus);
  TrainOutcome out;
  out.config_hash = rec.config_hash;
  out.corpus_hash = rec.corpus_hash;
  fs::create_directories(out_dir);
  try {
    out.result = train(initial_model(cfg, corpus), corpus, cfg.train, rec.config_hash);
  } catch (const Divergence& e) {
    rec.status = "diverged";
    rec.message = e.what();
    rec.wall_clock_seconds = clock.seconds();
    rec.write(out_dir);
    throw;
  }
  save_checkpoint(out.result.checkpoint, (out_dir / "checkpoint.bin").string());
  write_file(out_dir / "loss_trace.csv", loss_trace_csv(out.result.trace));
  rec.outputs = {"checkpoint.bin", "loss_trace.csv"};
  rec.wall_clock_seconds = clock.seconds();
  rec.write(out_dir);
  return out;
}

// ---------------------------------------------------------------------------
// eval

inline const std::vector<std::string> kEvalMetrics = {"self_bleu", "distinct_n", "entropy", "coverage"};

struct EvalSpec {
  SamplingConfig sampling;
  std::size_t k = 10;
  std::vector<std::string> metrics = {"self_bleu", "distinct_n", "entropy"};
  std::string match = "boxed";  // "boxed": last \boxed{} equals the key; "exact": whole completion does

  void validate(bool have_answers) const {
    sampling.validate();
    if (k == 0) throw UsageError("k must be >= 1");
    for (const auto& m : metrics) {
      if (std::find(kEvalMetrics.begin(), kEvalMetrics.end(), m) == kEvalMetrics.end()) {
        throw UsageError("unknown metric '" + m + "'");
      }
    }
    auto wants = [&](const char* m) { return std::find(metrics.begin(), metrics.end(), m) != metrics.end(); };
    if (wants("self_bleu") && k < 2) throw UsageError("self_bleu needs k >= 2 completions per prompt");
    if (wants("coverage") && !have_answers) throw UsageError("coverage requested without an answer key");
    if (match != "boxed" && match != "exact") throw UsageError("match must be 'boxed' or 'exact'");
  }
};

struct EvalOutcome {
  std::vector<GenerationSet> generations;
  std::vector<MetricReport> reports;

  const MetricReport* report(std::string_view metric) const {
    for (const auto& r : reports) {
      if (r.metric == metric) return &r;
    }
    return nullptr;
  }
};

inline std::vector<GenerationSet> generate(const ToyModel& m, const std::vector<PromptEntry>& prompts,
                                           const SamplingConfig& sampling, std::size_t k) {
  std::vector<GenerationSet> out;
  for (const auto& p : prompts) {
    GenerationSet set{p.prompt_id, p.prompt, {}};
    const auto prompt_ids = m.vocab.encode(p.prompt);
    for (std::size_t i = 0; i < k; ++i) {
      std::mt19937_64 rng(completion_seed(sampling.seed, p.prompt_id, i));
      set.completions.push_back(m.vocab.decode(nucleus_sample(m, prompt_ids, sampling, rng)));
    }
    out.push_back(std::move(set));
  }
  return out;
}

inline bool is_success(const std::string& completion, const std::string& answer, const std::string& match) {
  if (match == "exact") return completion == answer;
  const auto boxed = extract_boxed_answer(completion);
  return boxed && *boxed == answer;
}

inline EvalOutcome evaluate_model(const ToyModel& m, const std::vector<PromptEntry>& prompts,
                                  const std::optional<std::map<std::string, std::string>>& answers, const EvalSpec& spec) {
  spec.validate(answers.has_value());
  EvalOutcome out;
  out.generations = generate(m, prompts, spec.sampling, spec.k);
  auto wants = [&](const char* metric) { return std::find(spec.metrics.begin(), spec.metrics.end(), metric) != spec.metrics.end(); };

  if (wants("self_bleu")) {
    std::vector<std::pair<std::string, double>> rows;
    for (const auto& g : out.generations) rows.emplace_back(g.prompt_id, self_bleu(g));
    out.reports.push_back(MetricReport::from("self_bleu", std::move(rows)));
  }
  if (wants("distinct_n")) {
    for (std::size_t n : {1, 2}) {
      std::vector<std::pair<std::string, double>> rows;
      for (const auto& g : out.generations) {
        try {
          rows.emplace_back(g.prompt_id, distinct_n(g.completions, n));
        } catch (const UndefinedMetric&) {
          // no n-grams at all for this prompt; it has no defined value
        }
      }
      out.reports.push_back(MetricReport::from("distinct_" + std::to_string(n), std::move(rows)));
    }
  }
  if (wants("entropy")) {
    std::vector<std::pair<std::string, double>> rows;
    for (const auto& g : out.generations) rows.emplace_back(g.prompt_id, answer_entropy(completion_distribution(g.completions)));
    out.reports.push_back(MetricReport::from("entropy", std::move(rows)));
  }
  if (wants("coverage")) {
    std::vector<std::pair<std::string, double>> cov;
    std::vector<std::pair<std::string, double>> mean;
    for (const auto& g : out.generations) {
      const auto it = answers->find(g.prompt_id);
      if (it == answers->end()) throw UsageError("answer key has no entry for prompt '" + g.prompt_id + "'");
      std::vector<bool> row;
      for (const auto& c : g.completions) row.push_back(is_success(c, it->second, spec.match));
      const auto r = coverage_and_mean({row});
      cov.emplace_back(g.prompt_id, r.coverage);
      mean.emplace_back(g.prompt_id, r.mean_success);
    }
    out.reports.push_back(MetricReport::from("coverage", std::move(cov)));
    out.reports.push_back(MetricReport::from("mean_success", std::move(mean)));
  }
  return out;
}

/// generations.jsonl plus one CSV per requested metric family.
inline std::vector<std::string> write_eval(const EvalOutcome& e, const fs::path& out_dir) {
  std::vector<std::string> files = {"generations.jsonl"};
  write_file(out_dir / "generations.jsonl", generations_jsonl(e.generations));
  const std::vector<std::pair<std::string, std::vector<std::string>>> families = {
      {"self_bleu.csv", {"self_bleu"}},
      {"distinct_n.csv", {"distinct_1", "distinct_2"}},
      {"entropy.csv", {"entropy"}},
      {"coverage.csv", {"coverage", "mean_success"}}};
  for (const auto& [file, names] : families) {
    std::vector<MetricReport> chosen;
    for (const auto& n : names) {
      if (const auto* r = e.report(n)) chosen.push_back(*r);
    }
    if (chosen.empty()) continue;
    write_file(out_dir / file, metric_csv(chosen));
    files.push_back(file);
  }
  return files;
}

struct EvalInputs {
  fs::path checkpoint;
  fs::path prompts;
  std::optional<fs::path> answers;
  EvalSpec spec;
};

inline EvalOutcome run_eval(const EvalInputs& in, const fs::path& out_dir, const json& invocation) {
  Stopwatch clock;
  if (!fs::exists(in.checkpoint)) throw UsageError("checkpoint not found: " + in.checkpoint.string());
  if (!fs::exists(in.prompts)) throw UsageError("prompts file not found: " + in.prompts.string());
  if (in.answers && !fs::exists(*in.answers)) throw UsageError("answer key not found: " + in.answers->string());
  const auto ck = load_checkpoint(in.checkpoint.string());
  const auto prompts = read_prompts(in.prompts);
  std::optional<std::map<std::string, std::string>> answers;
  if (in.answers) answers = read_answers(*in.answers);

  const auto outcome = evaluate_model(ck.model, prompts, answers, in.spec);
  RunRecord rec;
  rec.invocation = invocation;
  rec.config_hash = ck.config_hash;
  rec.corpus_hash = git_blob_hash(read_file(in.prompts));
  rec.outputs = write_eval(outcome, out_dir);
  rec.wall_clock_seconds = clock.seconds();
  rec.write(out_dir);
  return outcome;
}

// ---------------------------------------------------------------------------
// curves

struct CurveSpec {
  std::vector<double> gammas = {1, 2, 3, 5};
  std::vector<std::pair<double, double>> pr_grid = {{1.0, 1.0}, {1.0, 0.5}, {1.0, 0.1}, {0.8, 0.5}, {0.5, 0.5}};
  std::size_t points = 512;
  double p_min = 1e-6;
};

/// One row per p on a log-spaced grid over [p_min, 1]: the focal scaling g(p,
/// gamma) per gamma, then the lambda-PR weight for each (lambda, alpha).
inline std::string curves_csv(const CurveSpec& spec) {
  if (spec.points < 2) throw UsageError("curves need at least 2 points");
  std::vector<PrConfig> pr;
  for (const auto& [lambda, alpha] : spec.pr_grid) {
    PrConfig c{lambda, alpha, 1, 1};
    try {
      c.threshold();
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
    pr.push_back(c);
  }
  std::string out = "p";
  for (double g : spec.gammas) {
    if (!(g >= 0.0) || !std::isfinite(g)) throw UsageError("gamma must be >= 0");
    out += ",g_gamma" + format_double(g);
  }
  for (const auto& c : pr) out += ",w_" + format_double(c.lambda) + "_" + format_double(c.alpha);
  out += "\n";
  const double lo = std::log10(spec.p_min);
  for (std::size_t i = 0; i < spec.points; ++i) {
    const double p = i + 1 == spec.points ? 1.0 : std::pow(10.0, lo - lo * static_cast<double>(i) / static_cast<double>(spec.points - 1));
    out += format_double(p);
    for (double g : spec.gammas) out += "," + format_double(focal_scaling(p, g));
    for (const auto& c : pr) out += "," + format_double(pr_weight(p, c));
    out += "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// sweep
//
//   {"base_config": "base.json", "objectives": ["tofu"], "gammas": [2, 3],
//    "betas": [0.7, 0.8], "seeds": [1, 2], "workers": 1, "output_dir": "sweep",
//    "metrics": ["self_bleu", "distinct_n", "entropy"], "match": "boxed"}

struct SweepSpec {
  fs::path base_config;
  std::vector<Objective> objectives;
  std::vector<double> gammas;
  std::vector<double> betas;
  std::vector<std::uint64_t> seeds;
  std::size_t workers = 1;
  fs::path output_dir;
  std::optional<std::vector<std::string>> metrics;
  std::string match = "boxed";
};

inline SweepSpec parse_sweep_spec(const json& j, const fs::path& base) {
  detail::reject_unknown(j, {"base_config", "objectives", "gammas", "betas", "seeds", "workers", "output_dir", "metrics", "match"},
                         "sweep spec");
  SweepSpec s;
  if (!j.contains("base_config")) throw ConfigError("sweep spec needs base_config");
  s.base_config = detail::existing_path(j.at("base_config"), base, "base_config");
  try {
    for (const auto& o : j.value("objectives", json::array({"tofu"}))) {
      const auto obj = parse_objective(o.get<std::string>());
      if (!obj) throw ConfigError("unknown objective '" + o.get<std::string>() + "'");
      s.objectives.push_back(*obj);
    }
    if (j.contains("gammas")) s.gammas = j.at("gammas").get<std::vector<double>>();
    if (j.contains("betas")) s.betas = j.at("betas").get<std::vector<double>>();
    if (j.contains("seeds")) s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    s.workers = j.value("workers", std::size_t{1});
    s.output_dir = j.value("output_dir", std::string{});
    if (j.contains("metrics")) s.metrics = j.at("metrics").get<std::vector<std::string>>();
    s.match = j.value("match", std::string{"boxed"});
  } catch (const json::exception& e) {
    throw ConfigError(std::string("sweep spec: ") + e.what());
  }
  if (s.objectives.empty()) throw ConfigError("sweep grid is empty: no objectives");
  if (j.contains("gammas") && s.gammas.empty()) throw ConfigError("sweep grid is empty: no gammas");
  if (j.contains("betas") && s.betas.empty()) throw ConfigError("sweep grid is empty: no betas");
  if (j.contains("seeds") && s.seeds.empty()) throw ConfigError("sweep needs at least one seed");
  if (s.workers == 0) throw ConfigError("workers must be >= 1");
  return s;
}

inline SweepSpec load_sweep_spec(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_sweep_spec(j, path.parent_path());
}

inline std::string cell_label(const LossConfig& o) {
  std::string s(to_string(o.objective));
  const json params = objective_json(o);
  for (const auto& [k, v] : params.items()) {
    if (k != "name") s += " " + k + "=" + format_double(v.get<double>());
  }
  return s;
}

struct SweepCell {
  std::string label;
  LossConfig loss;
};

struct SweepFailure {
  std::string cell;
  std::uint64_t seed = 0;
  std::string message;
};

struct SweepOutcome {
  std::vector<SweepCell> cells;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> metrics;
  // values[cell][seed index][metric]
  std::vector<std::vector<std::map<std::string, double>>> values;
  std::vector<SweepFailure> failures;
  std::size_t duplicates_dropped = 0;

  /// Rows "metric,seed,<cells...>": one per seed, then the median.
  std::string summary_csv() const {
    std::string out = "metric,seed";
    for (const auto& c : cells) out += "," + csv_field(c.label);
    out += "\n";
    for (const auto& m : metrics) {
      for (std::size_t si = 0; si < seeds.size(); ++si) {
        out += m + "," + std::to_string(seeds[si]);
        for (std::size_t ci = 0; ci < cells.size(); ++ci) out += "," + format_double(value(ci, si, m));
        out += "\n";
      }
      out += m + ",median";
      for (std::size_t ci = 0; ci < cells.size(); ++ci) {
        std::vector<double> v;
        for (std::size_t si = 0; si < seeds.size(); ++si) v.push_back(value(ci, si, m));
        out += "," + format_double(median(v));
      }
      out += "\n";
    }
    return out;
  }

  double value(std::size_t cell, std::size_t seed_index, const std::string& metric) const {
    const auto& row = values[cell][seed_index];
    const auto it = row.find(metric);
    return it == row.end() ? kNaN : it->second;
  }
};

inline std::string slug(std::string s) {
  for (char& ch : s) {
    if (ch == ' ') ch = '_';
  }
  return s;
}

/// Trains and evaluates every (cell, seed) pair, up to `workers` at a time.
/// Cells whose configs hash the same are run once. A failing job is recorded
/// and the sweep continues.
inline SweepOutcome run_sweep(const SweepSpec& spec, const fs::path& out_dir, const json& invocation) {
  Stopwatch clock;
  const ExperimentConfig base = load_experiment_config(spec.base_config);
  SweepOutcome out;
  out.seeds = spec.seeds.empty() ? base.seed_list() : spec.seeds;

  const auto gammas = spec.gammas.empty() ? std::vector{base.train.objective.gamma} : spec.gammas;
  const auto betas = spec.betas.empty() ? std::vector{base.train.objective.beta} : spec.betas;
  std::set<std::string> seen;
  for (Objective o : spec.objectives) {
    for (double g : gammas) {
      for (double b : betas) {
        LossConfig loss = base.train.objective.objective == o ? base.train.objective : LossConfig::defaults(o);
        loss.gamma = g;
        loss.beta = b;
        ExperimentConfig probe = base.with_seed(out.seeds.front());
        probe.train.objective = loss;
        try {
          probe.validate();
        } catch (const DomainError& e) {
          throw ConfigError(e.what());
        }
        if (!seen.insert(config_hash(probe)).second) {
          ++out.duplicates_dropped;
          continue;
        }
        out.cells.push_back({cell_label(loss), loss});
      }
    }
  }

  EvalSpec eval;
  eval.sampling = base.sampling;
  eval.k = base.k;
  eval.match = spec.match;
  const bool have_answers = base.data.answers.has_value();
  if (spec.metrics) {
    eval.metrics = *spec.metrics;
  } else {
    eval.metrics.clear();
    if (base.k >= 2) eval.metrics.push_back("self_bleu");
    eval.metrics.insert(eval.metrics.end(), {"distinct_n", "entropy"});
    if (have_answers) eval.metrics.push_back("coverage");
  }
  std::optional<std::vector<PromptEntry>> prompts;
  std::optional<std::map<std::string, std::string>> answers;
  if (base.data.prompts) {
    eval.validate(have_answers);
    prompts = read_prompts(*base.data.prompts);
    if (have_answers) answers = read_answers(*base.data.answers);
  }

  out.metrics = {"final_loss"};
  if (prompts) {
    auto add = [&](const char* family, std::initializer_list<const char*> names) {
      if (std::find(eval.metrics.begin(), eval.metrics.end(), family) != eval.metrics.end()) {
        out.metrics.insert(out.metrics.end(), names.begin(), names.end());
      }
    };
    add("self_bleu", {"self_bleu"});
    add("distinct_n", {"distinct_1", "distinct_2"});
    add("entropy", {"entropy"});
    add("coverage", {"coverage", "mean_success"});
  }

  out.values.assign(out.cells.size(), std::vector<std::map<std::string, double>>(out.seeds.size()));
  const std::size_t jobs = out.cells.size() * out.seeds.size();
  std::vector<std::string> job_error(jobs);
  std::vector<std::string> job_hash(jobs);
  std::atomic<std::size_t> next{0};

  auto worker = [&] {
    for (std::size_t job = next++; job < jobs; job = next++) {
      const std::size_t ci = job / out.seeds.size();
      const std::size_t si = job % out.seeds.size();
      ExperimentConfig cfg = base.with_seed(out.seeds[si]);
      cfg.train.objective = out.cells[ci].loss;
      const fs::path dir = out_dir / "cells" / slug(out.cells[ci].label) / ("seed_" + std::to_string(out.seeds[si]));
      auto& row = out.values[ci][si];
      try {
        json inv = invocation;
        inv["cell"] = out.cells[ci].label;
        inv["seed"] = out.seeds[si];
        const auto trained = run_train(cfg, dir, inv);
        job_hash[job] = trained.config_hash;
        row["final_loss"] = trained.result.trace.empty() ? kNaN : trained.result.trace.back().loss;
        if (prompts) {
          const auto e = evaluate_model(trained.result.checkpoint.model, *prompts, answers, eval);
          write_eval(e, dir);
          for (const auto& r : e.reports) row[r.metric] = r.mean;
        }
      } catch (const std::exception& e) {
        job_error[job] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(spec.workers, std::max<std::size_t>(jobs, 1)); ++w) pool.emplace_back(worker);
  for (auto& t : pool) t.join();

  std::string status = "cell,seed,config_hash,status,message\n";
  for (std::size_t job = 0; job < jobs; ++job) {
    const std::size_t ci = job / out.seeds.size();
    const std::size_t si = job % out.seeds.size();
    const bool ok = job_error[job].empty();
    if (!ok) out.failures.push_back({out.cells[ci].label, out.seeds[si], job_error[job]});
    status += csv_field(out.cells[ci].label) + "," + std::to_string(out.seeds[si]) + "," + job_hash[job] + "," +
              (ok ? "ok" : "failed") + "," + csv_field(job_error[job]) + "\n";
  }
  write_file(out_dir / "summary.csv", out.summary_csv());
  write_file(out_dir / "status.csv", status);

  RunRecord rec;
  rec.invocation = invocation;
  rec.canonical_config = canonical_json(base);
  rec.config_hash = sha1_hex(rec.canonical_config.dump());
  rec.corpus_hash = git_blob_hash(read_file(base.data.corpus));
  rec.outputs = {"summary.csv", "status.csv", "cells/"};
  rec.status = out.failures.empty() ? "ok" : "partial";
  if (!out.failures.empty()) rec.message = std::to_string(out.failures.size()) + " of " + std::to_string(jobs) + " jobs failed";
  rec.wall_clock_seconds = clock.seconds();
  rec.write(out_dir);
  return out;
}

// ---------------------------------------------------------------------------
// probe
//
// Prompt spec: {"prompt": "pick:", "valid_tokens": "12345"}

struct ProbeSpec {
  std::string prompt;
  std::string valid_tokens;
};

inline ProbeSpec load_probe_spec(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  detail::reject_unknown(j, {"prompt", "valid_tokens"}, "probe spec");
  ProbeSpec s;
  detail::read_key(j, "prompt", s.prompt, "probe spec");
  detail::read_key(j, "valid_tokens", s.valid_tokens, "probe spec");
  if (s.valid_tokens.empty()) throw ConfigError("probe spec needs valid_tokens");
  return s;
}

/// A training stage of the probe pipeline: config plus its loaded corpus.
struct ProbeArm {
  std::string label;
  ExperimentConfig cfg;
  Corpus corpus;
};

struct ProbeRow {
  std::string label;  // "pretrained" or the SFT arm label
  std::uint64_t seed = 0;
  ProbeResult probe;
  double entropy = 0.0;  // over the renormalized valid tokens
  std::size_t argmax = 0;
};

struct ProbeVerdict {
  std::string label;
  double median_entropy = 0.0;
  double reference_median_entropy = 0.0;  // CE arm
  bool entropy_higher = false;
  bool same_argmax = false;  // on every seed
  double median_tail_mass = 0.0;
  double pretrained_median_tail_mass = 0.0;
  double tail_ratio = 0.0;
};

struct ProbeOutcome {
  std::vector<ProbeRow> rows;
  std::vector<std::string> labels;  // "pretrained" first, then the arms
  std::vector<ProbeVerdict> verdicts;

  std::vector<const ProbeRow*> rows_of(const std::string& label) const {
    std::vector<const ProbeRow*> out;
    for (const auto& r : rows) {
      if (r.label == label) out.push_back(&r);
    }
    return out;
  }
  double median_entropy(const std::string& label) const {
    std::vector<double> v;
    for (const auto* r : rows_of(label)) v.push_back(r->entropy);
    return median(v);
  }
  double median_tail(const std::string& label) const {
    std::vector<double> v;
    for (const auto* r : rows_of(label)) v.push_back(r->probe.tail_mass);
    return median(v);
  }
};

inline ProbeRow probe_row(const ToyModel& m, const ProbeSpec& spec, std::string label, std::uint64_t seed) {
  ProbeRow r{std::move(label), seed, probe_token_distribution(m, spec.prompt, spec.valid_tokens), 0.0, 0};
  r.entropy = answer_entropy(r.probe.renormalized());
  r.argmax = static_cast<std::size_t>(std::max_element(r.probe.valid_probs.begin(), r.probe.valid_probs.end()) -
                                      r.probe.valid_probs.begin());
  return r;
}

/// Per seed: pretrain once, then fine-tune a copy of the pretrained model
/// under every SFT arm, probing the first response token after each stage.
inline ProbeOutcome run_probe(const ProbeArm& pretrain, const std::vector<ProbeArm>& sft, const ProbeSpec& spec) {
  std::set<std::string> labels = {"pretrained"};
  for (const auto& a : sft) {
    if (!labels.insert(a.label).second) throw ConfigError("duplicate probe arm '" + a.label + "'");
    if (a.cfg.data.init_checkpoint) throw ConfigError("SFT config '" + a.label + "' must not set init_checkpoint");
  }
  ProbeOutcome out;
  out.labels.push_back("pretrained");
  for (const auto& a : sft) out.labels.push_back(a.label);

  for (std::uint64_t seed : pretrain.cfg.seed_list()) {
    const auto pcfg = pretrain.cfg.with_seed(seed);
    const ToyModel base = train(initial_model(pcfg, pretrain.corpus), pretrain.corpus, pcfg.train).checkpoint.model;
    for (char ch : spec.prompt + spec.valid_tokens) {
      if (!base.vocab.contains(ch)) throw ConfigError(std::string("probe character '") + ch + "' not in the pretrained vocab");
    }
    out.rows.push_back(probe_row(base, spec, "pretrained", seed));
    for (const auto& a : sft) {
      try {
        a.corpus.validate(base.vocab);
      } catch (const TokenizationError& e) {
        throw ConfigError("vocab mismatch in SFT arm '" + a.label + "': " + e.what());
      }
      const auto scfg = a.cfg.with_seed(seed);
      const ToyModel tuned = train(base, a.corpus, scfg.train).checkpoint.model;
      out.rows.push_back(probe_row(tuned, spec, a.label, seed));
    }
  }

  if (labels.contains("ce")) {
    const auto ce_rows = out.rows_of("ce");
    for (const auto& a : sft) {
      if (a.label == "ce") continue;
      ProbeVerdict v;
      v.label = a.label;
      v.median_entropy = out.median_entropy(a.label);
      v.reference_median_entropy = out.median_entropy("ce");
      v.entropy_higher = v.median_entropy > v.reference_median_entropy;
      const auto arm_rows = out.rows_of(a.label);
      v.same_argmax = true;
      for (std::size_t i = 0; i < arm_rows.size(); ++i) v.same_argmax = v.same_argmax && arm_rows[i]->argmax == ce_rows[i]->argmax;
      v.median_tail_mass = out.median_tail(a.label);
      v.pretrained_median_tail_mass = out.median_tail("pretrained");
      v.tail_ratio = v.median_tail_mass / v.pretrained_median_tail_mass;
      out.verdicts.push_back(v);
    }
  }
  return out;
}

inline std::string probe_csv(const ProbeOutcome& o, const ProbeSpec& spec) {
  std::string out = "objective,seed";
  for (char ch : spec.valid_tokens) out += "," + csv_field(std::string("p_") + ch);
  out += ",tail_mass,entropy\n";
  for (const auto& r : o.rows) {
    out += csv_field(r.label) + "," + std::to_string(r.seed);
    for (double p : r.probe.valid_probs) out += "," + format_double(p);
    out += "," + format_double(r.probe.tail_mass) + "," + format_double(r.entropy) + "\n";
  }
  return out;
}

inline std::string probe_summary_csv(const ProbeOutcome& o) {
  std::string out = "objective,median_entropy,median_tail_mass\n";
  for (const auto& l : o.labels) {
    out += csv_field(l) + "," + format_double(o.median_entropy(l)) + "," + format_double(o.median_tail(l)) + "\n";
  }
  return out;
}

inline std::string verdict_csv(const ProbeOutcome& o) {
  std::string out =
      "objective,reference,median_entropy,reference_median_entropy,entropy_higher,same_argmax,median_tail_mass,"
      "pretrained_median_tail_mass,tail_ratio\n";
  for (const auto& v : o.verdicts) {
    out += csv_field(v.label) + ",ce," + format_double(v.median_entropy) + "," + format_double(v.reference_median_entropy) +
           "," + (v.entropy_higher ? "true" : "false") + "," + (v.same_argmax ? "true" : "false") + "," +
           format_double(v.median_tail_mass) + "," + format_double(v.pretrained_median_tail_mass) + "," +
           format_double(v.tail_ratio) + "\n";
  }
  return out;
}

/// Loads the configs, runs the probe and writes probe.csv, probe_summary.csv,
/// verdict.csv and run_record.json. SFT arms are labelled by objective name.
inline ProbeOutcome run_probe_files(const fs::path& pretrain_config, const std::vector<fs::path>& sft_configs,
                                    const fs::path& prompt_spec, const fs::path& out_dir, const json& invocation) {
  Stopwatch clock;
  if (sft_configs.empty()) throw UsageError("probe needs at least one SFT config");
  const auto pcfg = load_experiment_config(pretrain_config);
  ProbeArm pre{"pretrained", pcfg, read_corpus(pcfg.data.corpus)};
  std::vector<ProbeArm> arms;
  json canonical;
  canonical["pretrain"] = canonical_json(pcfg);
  for (const auto& p : sft_configs) {
    auto c = load_experiment_config(p);
    canonical["sft"].push_back(canonical_json(c));
    arms.push_back({std::string(to_string(c.train.objective.objective)), c, read_corpus(c.data.corpus)});
  }
  const auto spec = load_probe_spec(prompt_spec);
  canonical["probe"] = {{"prompt", spec.prompt}, {"valid_tokens", spec.valid_tokens}};

  const auto outcome = run_probe(pre, arms, spec);
  write_file(out_dir / "probe.csv", probe_csv(outcome, spec));
  write_file(out_dir / "probe_summary.csv", probe_summary_csv(outcome));
  write_file(out_dir / "verdict.csv", verdict_csv(outcome));

  RunRecord rec;
  rec.invocation = invocation;
  rec.canonical_config = canonical;
  rec.config_hash = sha1_hex(canonical.dump());
  rec.corpus_hash = git_blob_hash(read_file(pcfg.data.corpus));
  rec.outputs = {"probe.csv", "probe_summary.csv", "verdict.csv"};
  rec.wall_clock_seconds = clock.seconds();
  rec.write(out_dir);
  return outcome;
}

}  // namespace sftlab
