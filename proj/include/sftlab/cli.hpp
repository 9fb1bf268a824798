#pragma once

// `sftlab` command line: gradcheck, train, eval, sweep, curves, probe.
// Exit codes: 0 success, 1 runtime or check failure, 2 usage or config error.

#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "sftlab/harness.hpp"

namespace sftlab {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

namespace detail {

inline std::vector<double> parse_number_list(const std::string& text, const char* what) {
  std::vector<double> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError(std::string("bad number '") + item + "' in " + what);
    }
  }
  if (out.empty()) throw UsageError(std::string(what) + " is empty");
  return out;
}

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline fs::path require_out(const std::string& flag, const fs::path& from_config) {
  if (!flag.empty()) return output_path(flag);
  if (!from_config.empty()) return output_path(from_config);
  throw UsageError("no output directory: pass --out or set output_dir in the config");
}

}  // namespace detail

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Loss-function laboratory for diversity-preserving fine-tuning objectives"};
  app.require_subcommand(1);

  json invocation;
  invocation["args"] = std::vector<std::string>(argv + 1, argv + argc);

  GradcheckOptions gc;
  std::string gc_objective;
  auto* gradcheck = app.add_subcommand("gradcheck", "Verify gradient identities and finite-difference agreement");
  gradcheck->add_option("--trials", gc.trials, "Random trials per check")->capture_default_str();
  gradcheck->add_option("--seed", gc.seed, "Trial generator seed")->capture_default_str();
  gradcheck->add_option("--objective", gc_objective, "Restrict the finite-difference suite to one objective");
  gradcheck->add_option("--step", gc.fd.step, "Central-difference step")->capture_default_str();
  gradcheck->add_option("--tolerance", gc.fd.tolerance, "Oracle tolerance")->capture_default_str();

  std::string train_config;
  std::string train_out;
  auto* train_cmd = app.add_subcommand("train", "Train the toy model from a config");
  train_cmd->add_option("--config", train_config, "Experiment config (JSON)")->required();
  train_cmd->add_option("--out", train_out, "Output directory (overrides output_dir)");

  EvalInputs ev;
  std::string ev_checkpoint;
  std::string ev_prompts;
  std::string ev_answers;
  std::string ev_metrics = "self_bleu,distinct_n,entropy";
  std::string ev_out;
  auto* eval_cmd = app.add_subcommand("eval", "Sample completions and compute diversity/quality metrics");
  eval_cmd->add_option("--checkpoint", ev_checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--prompts", ev_prompts, "Prompts JSONL")->required();
  eval_cmd->add_option("--answers", ev_answers, "Answer key JSONL (needed for coverage)");
  eval_cmd->add_option("--k", ev.spec.k, "Completions per prompt")->capture_default_str();
  eval_cmd->add_option("--top-p", ev.spec.sampling.top_p, "Nucleus mass")->capture_default_str();
  eval_cmd->add_option("--temperature", ev.spec.sampling.temperature, "Sampling temperature")->capture_default_str();
  eval_cmd->add_option("--max-tokens", ev.spec.sampling.max_tokens, "Maximum completion length")->capture_default_str();
  eval_cmd->add_option("--seed", ev.spec.sampling.seed, "Base sampling seed")->capture_default_str();
  eval_cmd->add_option("--metrics", ev_metrics, "Comma list of self_bleu,distinct_n,entropy,coverage")->capture_default_str();
  eval_cmd->add_option("--match", ev.spec.match, "Answer matching: boxed or exact")->capture_default_str();
  eval_cmd->add_option("--out", ev_out, "Output directory")->required();

  std::string sweep_spec;
  std::string sweep_out;
  std::size_t sweep_workers = 0;
  auto* sweep_cmd = app.add_subcommand("sweep", "Train and evaluate a (gamma, beta) grid over seeds");
  sweep_cmd->add_option("--spec", sweep_spec, "Sweep spec (JSON)")->required();
  sweep_cmd->add_option("--out", sweep_out, "Output directory (overrides output_dir)");
  sweep_cmd->add_option("--workers", sweep_workers, "Concurrent jobs (overrides the spec)");

  std::string curves_out;
  std::string curves_gammas;
  std::string curves_pr;
  auto* curves_cmd = app.add_subcommand("curves", "Emit gradient-scaling curves as CSV");
  curves_cmd->add_option("--out", curves_out, "Output CSV path")->required();
  curves_cmd->add_option("--gammas", curves_gammas, "Comma list of gammas (default 1,2,3,5)");
  curves_cmd->add_option("--pr", curves_pr, "Comma list of lambda:alpha pairs");

  std::string probe_pretrain;
  std::vector<std::string> probe_sft;
  std::string probe_prompt;
  std::string probe_out;
  auto* probe_cmd = app.add_subcommand("probe", "Pretrain, branch SFT per objective, probe the first answer token");
  probe_cmd->add_option("--pretrain", probe_pretrain, "Pretraining config")->required();
  probe_cmd->add_option("--sft", probe_sft, "SFT configs, one per objective")->required();
  probe_cmd->add_option("--prompt-spec", probe_prompt, "Probe prompt spec (JSON)")->required();
  probe_cmd->add_option("--out", probe_out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gradcheck->parsed()) {
      invocation["command"] = "gradcheck";
      if (!gc_objective.empty()) {
        gc.objective = parse_objective(gc_objective);
        if (!gc.objective) throw UsageError("unknown objective '" + gc_objective + "'");
      }
      try {
        gc.fd.validate();
      } catch (const DomainError& e) {
        throw UsageError(e.what());
      }
      bool all = true;
      for (const auto& r : run_gradcheck(gc)) {
        out << to_json(r).dump() << "\n";
        all = all && r.pass();
      }
      return all ? kExitOk : kExitFailure;
    }
    if (train_cmd->parsed()) {
      invocation["command"] = "train";
      const auto cfg = load_experiment_config(train_config);
      const auto dir = detail::require_out(train_out, cfg.output_dir);
      const auto r = run_train(cfg, dir, invocation);
      out << "trained " << r.result.trace.size() << " steps; config " << r.config_hash << "; wrote " << dir.string() << "\n";
      return kExitOk;
    }
    if (eval_cmd->parsed()) {
      invocation["command"] = "eval";
      ev.checkpoint = ev_checkpoint;
      ev.prompts = ev_prompts;
      if (!ev_answers.empty()) ev.answers = fs::path(ev_answers);
      ev.spec.metrics = detail::split_list(ev_metrics);
      const auto dir = output_path(ev_out);
      const auto r = run_eval(ev, dir, invocation);
      for (const auto& rep : r.reports) out << rep.metric << " mean " << format_double(rep.mean) << "\n";
      return kExitOk;
    }
    if (sweep_cmd->parsed()) {
      invocation["command"] = "sweep";
      auto spec = load_sweep_spec(sweep_spec);
      if (sweep_workers > 0) spec.workers = sweep_workers;
      const auto dir = detail::require_out(sweep_out, spec.output_dir);
      const auto r = run_sweep(spec, dir, invocation);
      out << r.cells.size() << " cells x " << r.seeds.size() << " seeds";
      if (r.duplicates_dropped > 0) out << " (" << r.duplicates_dropped << " duplicate cells dropped)";
      out << "; wrote " << (dir / "summary.csv").string() << "\n";
      for (const auto& f : r.failures) err << "cell '" << f.cell << "' seed " << f.seed << " failed: " << f.message << "\n";
      return r.failures.empty() ? kExitOk : kExitFailure;
    }
    if (curves_cmd->parsed()) {
      CurveSpec spec;
      if (!curves_gammas.empty()) spec.gammas = detail::parse_number_list(curves_gammas, "--gammas");
      if (!curves_pr.empty()) {
        spec.pr_grid.clear();
        for (const auto& pair : detail::split_list(curves_pr)) {
          const auto colon = pair.find(':');
          if (colon == std::string::npos) throw UsageError("--pr entries look like lambda:alpha");
          const auto l = detail::parse_number_list(pair.substr(0, colon), "--pr");
          const auto a = detail::parse_number_list(pair.substr(colon + 1), "--pr");
          spec.pr_grid.emplace_back(l.front(), a.front());
        }
      }
      const auto path = output_path(curves_out);
      write_file(path, curves_csv(spec));
      out << "wrote " << path.string() << "\n";
      return kExitOk;
    }
    if (probe_cmd->parsed()) {
      invocation["command"] = "probe";
      std::vector<fs::path> sft(probe_sft.begin(), probe_sft.end());
      const auto dir = output_path(probe_out);
      const auto r = run_probe_files(probe_pretrain, sft, probe_prompt, dir, invocation);
      for (const auto& l : r.labels) {
        out << l << ": median entropy " << format_double(r.median_entropy(l)) << ", median tail "
            << format_double(r.median_tail(l)) << "\n";
      }
      for (const auto& v : r.verdicts) {
        out << "verdict " << v.label << " vs ce: entropy_higher=" << (v.entropy_higher ? "true" : "false")
            << " same_argmax=" << (v.same_argmax ? "true" : "false") << " tail_ratio=" << format_double(v.tail_ratio)
            << "\n";
      }
      return kExitOk;
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace sftlab
