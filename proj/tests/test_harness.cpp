#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "catch_amalgamated.hpp"
#include "sftlab/cli.hpp"

using namespace sftlab;
using Catch::Matchers::WithinAbs;
namespace fs = std::filesystem;

namespace {

// Fresh scratch directory per test, removed on exit.
struct Scratch {
  fs::path dir;
  explicit Scratch(const std::string& name) : dir(fs::temp_directory_path() / ("sftlab_test_" + name)) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
  fs::path put(const std::string& file, const std::string& text) const {
    write_file(dir / file, text);
    return dir / file;
  }
};

struct CliRun {
  int code = 0;
  std::string out;
  std::string err;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "sftlab");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out;
  std::ostringstream err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

const char* kCorpus = R"({"prompt": "1+1=", "response": " \\boxed{2}"}
{"prompt": "1+2=", "response": " \\boxed{3}"}
)";
const char* kPrompts = R"({"prompt_id": "a", "prompt": "1+1="}
{"prompt_id": "b", "prompt": "1+2="}
)";
const char* kAnswers = R"({"prompt_id": "a", "answer": "2"}
{"prompt_id": "b", "answer": "3"}
)";

json small_config(const std::string& objective = "ce", std::size_t steps = 20) {
  return json{{"objective", {{"name", objective}}},
              {"train", {{"learning_rate", 0.1}, {"warmup_steps", 2}, {"total_steps", steps}, {"batch_size", 2}}},
              {"model", {{"embed_dim", 4}, {"hidden_dim", 8}, {"context", 4}}},
              {"sampling", {{"k", 3}, {"max_tokens", 6}}},
              {"data", {{"corpus", "corpus.jsonl"}, {"prompts", "prompts.jsonl"}, {"answers", "answers.jsonl"}}}};
}

void seed_inputs(const Scratch& s) {
  s.put("corpus.jsonl", kCorpus);
  s.put("prompts.jsonl", kPrompts);
  s.put("answers.jsonl", kAnswers);
}

}  // namespace

TEST_CASE("io helpers") {
  CHECK(git_blob_hash("hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a");
  CHECK(sha1_hex("abc") == "a9993e364706816aba3e25717850c26c9cd0d89d");
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(2.0) == "2");
  CHECK(format_double(kNaN) == "nan");
  CHECK(csv_field("plain") == "plain");
  CHECK(csv_field("a,b") == "\"a,b\"");
  CHECK(csv_field("say \"hi\"") == "\"say \"\"hi\"\"\"");
  CHECK(median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(median({4.0, 1.0, kNaN, 2.0, 3.0}) == 2.5);
  CHECK(std::isnan(median({kNaN})));
}

TEST_CASE("jsonl readers") {
  Scratch s("readers");
  seed_inputs(s);
  const auto c = read_corpus(s.dir / "corpus.jsonl");
  REQUIRE(c.examples.size() == 2);
  CHECK(c.examples[1].response == " \\boxed{3}");
  CHECK(read_corpus(s.put("round.jsonl", corpus_jsonl(c))).examples == c.examples);
  CHECK(read_prompts(s.dir / "prompts.jsonl")[1].prompt_id == "b");
  CHECK(read_answers(s.dir / "answers.jsonl").at("a") == "2");
  CHECK_THROWS_AS(read_corpus(s.put("bad.jsonl", "{\"prompt\": 1}\n")), ConfigError);
  CHECK_THROWS_AS(read_corpus(s.put("empty.jsonl", "\n")), ConfigError);
  CHECK_THROWS_AS(read_corpus(s.dir / "missing.jsonl"), ConfigError);
}

TEST_CASE("config parsing rejects unknown keys and missing inputs") {
  Scratch s("config");
  seed_inputs(s);
  CHECK_NOTHROW(parse_experiment_config(small_config(), s.dir));

  auto extra = small_config();
  extra["train"]["learnin_rate"] = 0.1;
  CHECK_THROWS_AS(parse_experiment_config(extra, s.dir), ConfigError);
  auto top = small_config();
  top["notes"] = "x";
  CHECK_THROWS_AS(parse_experiment_config(top, s.dir), ConfigError);
  auto missing = small_config();
  missing["data"]["corpus"] = "nope.jsonl";
  CHECK_THROWS_AS(parse_experiment_config(missing, s.dir), ConfigError);
  auto bad_obj = small_config("softmax");
  CHECK_THROWS_AS(parse_experiment_config(bad_obj, s.dir), ConfigError);
  auto bad_beta = small_config("tofu");
  bad_beta["objective"]["beta"] = 1.5;
  CHECK_THROWS_AS(parse_experiment_config(bad_beta, s.dir), ConfigError);
  auto bad_type = small_config();
  bad_type["train"]["total_steps"] = -3;
  CHECK_THROWS_AS(parse_experiment_config(bad_type, s.dir), ConfigError);
  auto bad_pr = small_config("lambda_pr");
  bad_pr["objective"]["lambda"] = 3.0;
  CHECK_THROWS_AS(parse_experiment_config(bad_pr, s.dir), ConfigError);
}

TEST_CASE("config hash is stable and tracks what matters") {
  Scratch s("hash");
  seed_inputs(s);
  const auto base = parse_experiment_config(small_config(), s.dir);
  const auto h = config_hash(base);
  CHECK(h.size() == 40);
  CHECK(config_hash(parse_experiment_config(small_config(), s.dir)) == h);

  auto moved = small_config();
  moved["output_dir"] = "elsewhere";
  CHECK(config_hash(parse_experiment_config(moved, s.dir)) == h);
  auto unused = small_config();
  unused["objective"]["gamma"] = 4.0;  // CE ignores gamma
  CHECK(config_hash(parse_experiment_config(unused, s.dir)) == h);

  auto lr = small_config();
  lr["train"]["learning_rate"] = 0.2;
  CHECK(config_hash(parse_experiment_config(lr, s.dir)) != h);
  s.put("corpus.jsonl", std::string(kCorpus) + "{\"prompt\": \"2+2=\", \"response\": \" \\\\boxed{4}\"}\n");
  CHECK(config_hash(parse_experiment_config(small_config(), s.dir)) != h);
}

TEST_CASE("output root prefixes relative output paths") {
  ::setenv("SFTLAB_OUTPUT_ROOT", "/tmp/root", 1);
  CHECK(output_path("runs/a") == fs::path("/tmp/root/runs/a"));
  CHECK(output_path("/abs/x") == fs::path("/abs/x"));
  ::unsetenv("SFTLAB_OUTPUT_ROOT");
  CHECK(output_path("runs/a") == fs::path("runs/a"));
}

TEST_CASE("cli usage errors exit 2") {
  CHECK(cli({}).code == 2);
  CHECK(cli({"frobnicate"}).code == 2);
  CHECK(cli({"gradcheck", "--objective", "unknown"}).code == 2);
  CHECK(cli({"gradcheck", "--trials", "ten"}).code == 2);
  CHECK(cli({"gradcheck", "--step", "0"}).code == 2);
  CHECK(cli({"train", "--config", "/nonexistent/config.json"}).code == 2);
  CHECK(cli({"curves", "--out", "/tmp/x.csv", "--pr", "2:0.5"}).code == 2);
  CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("cli gradcheck output is byte-identical across runs") {
  const auto a = cli({"gradcheck", "--trials", "10", "--seed", "7"});
  const auto b = cli({"gradcheck", "--trials", "10", "--seed", "7"});
  CHECK(a.code == 0);
  CHECK(a.out == b.out);
  std::istringstream lines(a.out);
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    const auto j = json::parse(line);
    CHECK(j.at("pass").get<bool>());
    ++n;
  }
  CHECK(n == 5);
  const auto tofu_only = cli({"gradcheck", "--trials", "10", "--objective", "tofu"});
  CHECK(tofu_only.code == 0);
  const auto last = json::parse(tofu_only.out.substr(tofu_only.out.rfind('\n', tofu_only.out.size() - 2) + 1));
  CHECK(last.at("check") == "fd_oracle_all_objectives");
  REQUIRE(last.at("measures").size() == 1);
  CHECK(last.at("measures")[0].at("name") == "tofu_vs_oracle");
}

TEST_CASE("cli gradcheck fails with a counterexample under an impossible tolerance") {
  const auto r = cli({"gradcheck", "--trials", "5", "--tolerance", "1e-30"});
  CHECK(r.code == 1);
  CHECK(r.out.find("\"counterexample\":{") != std::string::npos);
}

TEST_CASE("train and eval through the cli") {
  Scratch s("train_eval");
  seed_inputs(s);
  const auto cfg_path = s.put("config.json", small_config().dump());
  const auto out1 = s.dir / "run1";
  const auto out2 = s.dir / "run2";
  REQUIRE(cli({"train", "--config", cfg_path.string(), "--out", out1.string()}).code == 0);
  REQUIRE(cli({"train", "--config", cfg_path.string(), "--out", out2.string()}).code == 0);
  CHECK(read_file(out1 / "checkpoint.bin") == read_file(out2 / "checkpoint.bin"));
  CHECK(read_file(out1 / "loss_trace.csv") == read_file(out2 / "loss_trace.csv"));
  CHECK(read_file(out1 / "loss_trace.csv").rfind("step,loss,lr\n", 0) == 0);
  const auto rec = json::parse(read_file(out1 / "run_record.json"));
  CHECK(rec.at("status") == "ok");
  CHECK(rec.at("config_hash") == config_hash(load_experiment_config(cfg_path)));
  CHECK(rec.at("corpus_hash") == git_blob_hash(kCorpus));

  auto eval_args = [&](const fs::path& out, const std::string& k, const std::string& metrics) {
    return std::vector<std::string>{"eval", "--checkpoint", (out1 / "checkpoint.bin").string(), "--prompts",
                                    (s.dir / "prompts.jsonl").string(), "--answers", (s.dir / "answers.jsonl").string(),
                                    "--k", k, "--max-tokens", "8", "--metrics", metrics, "--out", out.string()};
  };
  const std::string all = "self_bleu,distinct_n,entropy,coverage";
  REQUIRE(cli(eval_args(s.dir / "e1", "4", all)).code == 0);
  REQUIRE(cli(eval_args(s.dir / "e2", "4", all)).code == 0);
  for (const char* f : {"generations.jsonl", "self_bleu.csv", "distinct_n.csv", "entropy.csv", "coverage.csv"}) {
    INFO(f);
    CHECK(read_file(s.dir / "e1" / f) == read_file(s.dir / "e2" / f));
  }
  const auto gens = read_file(s.dir / "e1" / "generations.jsonl");
  CHECK(std::count(gens.begin(), gens.end(), '\n') == 8);
  const auto bleu = read_file(s.dir / "e1" / "self_bleu.csv");
  CHECK(bleu.rfind("metric,prompt_id,value\n", 0) == 0);
  CHECK(bleu.find("self_bleu,__mean__,") != std::string::npos);
  CHECK(bleu.find("self_bleu,__std__,") != std::string::npos);

  CHECK(cli(eval_args(s.dir / "e3", "1", "self_bleu")).code == 2);
  CHECK(cli(eval_args(s.dir / "e3", "4", "perplexity")).code == 2);
  CHECK(cli({"eval", "--checkpoint", (out1 / "checkpoint.bin").string(), "--prompts", (s.dir / "prompts.jsonl").string(),
             "--metrics", "coverage", "--out", (s.dir / "e4").string()})
            .code == 2);
}

TEST_CASE("training for zero steps writes the initial model") {
  Scratch s("zero_steps");
  seed_inputs(s);
  auto j = small_config("ce", 0);
  j["train"]["warmup_steps"] = 0;
  const auto cfg = parse_experiment_config(j, s.dir);
  const auto r = run_train(cfg, s.dir / "out", json::object());
  const auto init = initial_model(cfg, read_corpus(cfg.data.corpus));
  CHECK(load_checkpoint((s.dir / "out" / "checkpoint.bin").string()).model == init);
  CHECK(r.result.trace.empty());
}

TEST_CASE("eval coverage on an exact-match answer key") {
  Scratch s("coverage");
  seed_inputs(s);
  auto j = small_config("ce", 400);
  j["train"]["batch_size"] = 1;
  j["train"]["weight_decay"] = 0.0;
  j["model"] = {{"embed_dim", 8}, {"hidden_dim", 32}, {"context", 16}};  // window reaches the prompt digit
  const auto cfg = parse_experiment_config(j, s.dir);
  const auto trained = run_train(cfg, s.dir / "out", json::object());
  EvalSpec spec;
  spec.k = 4;
  spec.sampling.top_p = 1e-9;
  spec.metrics = {"coverage"};
  const auto e = evaluate_model(trained.result.checkpoint.model, read_prompts(s.dir / "prompts.jsonl"),
                                read_answers(s.dir / "answers.jsonl"), spec);
  const auto* cov = e.report("coverage");
  const auto* mean = e.report("mean_success");
  REQUIRE(cov != nullptr);
  REQUIRE(mean != nullptr);
  // Greedy decoding of a memorized pair reproduces the answer on every sample.
  CHECK(cov->mean == 1.0);
  CHECK(mean->mean == 1.0);
  CHECK(is_success("x \\boxed{2}", "2", "boxed"));
  CHECK_FALSE(is_success("x \\boxed{2}", "2", "exact"));
  CHECK(is_success("2", "2", "exact"));
}

TEST_CASE("curves csv") {
  CurveSpec spec;
  const auto text = curves_csv(spec);
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  CHECK(line == "p,g_gamma1,g_gamma2,g_gamma3,g_gamma5,w_1_1,w_1_0.5,w_1_0.1,w_0.8_0.5,w_0.5_0.5");
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    std::vector<double> row;
    std::istringstream cells(line);
    std::string cell;
    while (std::getline(cells, cell, ',')) row.push_back(std::stod(cell));
    REQUIRE(row.size() == 10);
    rows.push_back(row);
  }
  REQUIRE(rows.size() == 512);
  CHECK_THAT(rows.front()[0], WithinAbs(1e-6, 1e-18));
  CHECK(rows.back()[0] == 1.0);
  for (std::size_t c = 1; c <= 4; ++c) CHECK(rows.back()[c] == 0.0);
  CHECK(rows.back()[5] == 1.0);
  for (std::size_t i = 1; i < rows.size(); ++i) {
    CHECK(rows[i][0] > rows[i - 1][0]);
    CHECK_THAT(std::log(rows[i][0] / rows[i - 1][0]), WithinAbs(std::log(1e6) / 511, 1e-9));
  }
  for (const auto& r : rows) {
    for (std::size_t c = 1; c <= 4; ++c) CHECK(r[c] >= 0.0);
    CHECK(r[5] == r[0]);
    CHECK(r[6] >= r[0]);
    CHECK(r[6] <= 1.0);
  }
  CHECK_THROWS_AS(curves_csv(CurveSpec{{-1.0}, {}, 16, 1e-6}), UsageError);
}

TEST_CASE("sweep deduplicates cells and writes a summary") {
  Scratch s("sweep");
  seed_inputs(s);
  s.put("base.json", small_config("ce", 10).dump());
  // CE ignores gamma and beta, so the four grid points collapse to one cell.
  const json ce_spec = {{"base_config", "base.json"}, {"objectives", {"ce"}}, {"gammas", {2, 3}}, {"betas", {0.7, 0.8}}, {"seeds", {1, 2}}};
  const auto spec = parse_sweep_spec(ce_spec, s.dir);
  const auto r = run_sweep(spec, s.dir / "ce", json::object());
  CHECK(r.cells.size() == 1);
  CHECK(r.duplicates_dropped == 3);
  CHECK(r.failures.empty());

  const json tofu_spec = {{"base_config", "base.json"}, {"objectives", {"tofu"}}, {"gammas", {2, 3}},
                          {"betas", {0.7, 0.8}},       {"seeds", {1, 2}},        {"workers", 2}};
  const auto t = run_sweep(parse_sweep_spec(tofu_spec, s.dir), s.dir / "tofu", json::object());
  REQUIRE(t.cells.size() == 4);
  CHECK(t.failures.empty());
  const auto summary = read_file(s.dir / "tofu" / "summary.csv");
  CHECK(summary.rfind("metric,seed,tofu beta=0.7 gamma=2,tofu beta=0.8 gamma=2,tofu beta=0.7 gamma=3,tofu beta=0.8 gamma=3\n", 0) == 0);
  for (const char* m : {"final_loss", "self_bleu", "distinct_1", "distinct_2", "entropy", "coverage", "mean_success"}) {
    CHECK(summary.find(std::string(m) + ",median,") != std::string::npos);
  }
  CHECK(fs::exists(s.dir / "tofu" / "cells" / "tofu_beta=0.8_gamma=3" / "seed_2" / "checkpoint.bin"));
  CHECK(fs::exists(s.dir / "tofu" / "status.csv"));

  // Workers only change scheduling, never results.
  const json serial = {{"base_config", "base.json"}, {"objectives", {"tofu"}}, {"gammas", {2, 3}},
                       {"betas", {0.7, 0.8}},       {"seeds", {1, 2}},        {"workers", 1}};
  run_sweep(parse_sweep_spec(serial, s.dir), s.dir / "serial", json::object());
  CHECK(read_file(s.dir / "serial" / "summary.csv") == summary);

  CHECK_THROWS_AS(parse_sweep_spec(json{{"base_config", "base.json"}, {"gammas", json::array()}}, s.dir), ConfigError);
  CHECK_THROWS_AS(parse_sweep_spec(json{{"base_config", "base.json"}, {"grid", 1}}, s.dir), ConfigError);
  CHECK_THROWS_AS(parse_sweep_spec(json{{"base_config", "base.json"}, {"objectives", {"nope"}}}, s.dir), ConfigError);
}

TEST_CASE("sweep records failing jobs and keeps going") {
  Scratch s("sweep_fail");
  seed_inputs(s);
  auto j = small_config("tofu", 10);
  j["train"]["learning_rate"] = 1e300;  // diverges
  s.put("base.json", j.dump());
  const json spec = {{"base_config", "base.json"}, {"gammas", {2}}, {"betas", {0.8}}, {"seeds", {1}}};
  const auto r = run_sweep(parse_sweep_spec(spec, s.dir), s.dir / "out", json::object());
  CHECK(r.failures.size() == 1);
  CHECK(read_file(s.dir / "out" / "status.csv").find("failed") != std::string::npos);
  CHECK(json::parse(read_file(s.dir / "out" / "run_record.json")).at("status") == "partial");
  const auto rec = json::parse(read_file(s.dir / "out" / "cells" / "tofu_beta=0.8_gamma=2" / "seed_1" / "run_record.json"));
  CHECK(rec.at("status") == "diverged");
}

TEST_CASE("probe pipeline on a tiny corpus") {
  Scratch s("probe");
  s.put("pre.jsonl", "{\"prompt\": \"p:\", \"response\": \"a\"}\n{\"prompt\": \"p:\", \"response\": \"b\"}\n{\"prompt\": \"p:\", \"response\": \"c\"}\n");
  s.put("sft.jsonl", "{\"prompt\": \"p:\", \"response\": \"a\"}\n{\"prompt\": \"p:\", \"response\": \"a\"}\n{\"prompt\": \"p:\", \"response\": \"b\"}\n");
  auto cfg = [](const std::string& obj, const char* corpus, std::size_t steps) {
    json j{{"objective", {{"name", obj}}},
           {"train", {{"learning_rate", 0.1}, {"warmup_steps", 5}, {"total_steps", steps}, {"batch_size", 3}, {"weight_decay", 0.0}}},
           {"model", {{"embed_dim", 4}, {"hidden_dim", 8}, {"context", 4}}},
           {"data", {{"corpus", corpus}}}};
    return j;
  };
  auto pre = cfg("ce", "pre.jsonl", 100);
  pre["seeds"] = {1, 2, 3};
  s.put("pre.json", pre.dump());
  s.put("ce.json", cfg("ce", "sft.jsonl", 50).dump());
  s.put("tofu.json", cfg("tofu", "sft.jsonl", 50).dump());
  s.put("probe.json", R"({"prompt": "p:", "valid_tokens": "abc"})");
  const auto r = run_probe_files(s.dir / "pre.json", {s.dir / "ce.json", s.dir / "tofu.json"}, s.dir / "probe.json", s.dir / "out",
                                 json::object());
  CHECK(r.labels == std::vector<std::string>{"pretrained", "ce", "tofu"});
  CHECK(r.rows.size() == 9);
  REQUIRE(r.verdicts.size() == 1);
  CHECK(r.verdicts[0].label == "tofu");
  for (const char* f : {"probe.csv", "probe_summary.csv", "verdict.csv", "run_record.json"}) CHECK(fs::exists(s.dir / "out" / f));
  CHECK(read_file(s.dir / "out" / "probe.csv").rfind("objective,seed,p_a,p_b,p_c,tail_mass,entropy\n", 0) == 0);

  s.put("bad_probe.json", R"({"prompt": "p:", "valid_tokens": "xyz"})");
  CHECK_THROWS_AS(run_probe_files(s.dir / "pre.json", {s.dir / "ce.json"}, s.dir / "bad_probe.json", s.dir / "out2", json::object()),
                  ConfigError);
  s.put("alien.jsonl", "{\"prompt\": \"p:\", \"response\": \"z\"}\n");
  s.put("alien.json", cfg("ce", "alien.jsonl", 5).dump());
  CHECK_THROWS_AS(run_probe_files(s.dir / "pre.json", {s.dir / "alien.json"}, s.dir / "probe.json", s.dir / "out3", json::object()),
                  ConfigError);
}
