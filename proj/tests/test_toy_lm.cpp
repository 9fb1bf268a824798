#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "catch_amalgamated.hpp"
#include "sftlab/toy_lm.hpp"

using namespace sftlab;
using Catch::Matchers::WithinAbs;
namespace fs = std::filesystem;

namespace {

const ModelShape kSmall{8, 16, 4};

ToyModel small_model(std::uint64_t seed = 1) { return ToyModel::init(Vocab("abcdefg "), kSmall, seed); }

TrainConfig memorize_config() {
  TrainConfig c;
  c.learning_rate = 0.1;
  c.warmup_steps = 50;
  c.total_steps = 2000;
  c.weight_decay = 0.0;
  c.batch_size = 1;
  return c;
}

Corpus memorize_corpus() { return Corpus{{{"hello ", "world"}}}; }

ToyModel memorize_model() {
  return ToyModel::init(Vocab::from_texts(memorize_corpus().texts()), ModelShape{16, 32, 8}, 1);
}

std::vector<double> flatten(const Parameters& p) {
  std::vector<double> out;
  for (const auto* t : p.tensors()) out.insert(out.end(), t->begin(), t->end());
  return out;
}

}  // namespace

TEST_CASE("vocab") {
  const Vocab v("ab c");
  CHECK(v.size() == 5);
  CHECK(v.encode('a') == 1);
  CHECK(v.decode(std::vector<TokenId>{1, 3, 4, 0, 2}) == "a c");
  CHECK_THROWS_AS(v.encode('z'), TokenizationError);
  CHECK_THROWS_AS(Vocab("aa"), ConfigError);
  const std::vector<std::string> texts = {"ba", "ca"};
  CHECK(Vocab::from_texts(texts).symbols() == "abc");
}

TEST_CASE("zero model predicts the uniform distribution") {
  const auto m = ToyModel::zeros(Vocab("abcdefghijklmno"), kSmall);
  const std::vector<TokenId> history = {1, 2, 3};
  const auto l = log_softmax(forward(m, history));
  REQUIRE(l.size() == 16);
  for (double x : l.values()) CHECK_THAT(x, WithinAbs(-std::log(16.0), 1e-15));
}

TEST_CASE("forward rejects tokens outside the vocabulary") {
  const auto m = small_model();
  const std::vector<TokenId> bad = {1, 99};
  CHECK_THROWS_AS(forward(m, bad), TokenizationError);
}

TEST_CASE("zero logit gradient gives zero parameter gradients") {
  const auto m = small_model();
  const std::vector<TokenId> history = {1, 2};
  const auto g = backward(m, history, std::vector<double>(m.vocab_size(), 0.0));
  for (double x : flatten(g)) CHECK(x == 0.0);
}

TEST_CASE("backward matches finite differences of a linear readout") {
  const auto m = small_model(3);
  const std::vector<TokenId> history = {4, 1, 7};
  std::vector<double> w(m.vocab_size());
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 1.0);
  for (double& x : w) x = n(rng);
  const auto g = backward(m, history, w);
  auto f = [&](const ToyModel& model) {
    const auto z = forward(model, history);
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) s += w[i] * z[i];
    return s;
  };
  ToyModel probe = m;
  auto ga = g;
  double worst = 0.0;
  double scale = 0.0;
  for (std::size_t idx = 0; idx < m.params.count(); idx += 7) {
    double& th = probe.params.at(idx);
    const double saved = th;
    th = saved + 1e-5;
    const double fp = f(probe);
    th = saved - 1e-5;
    const double fm = f(probe);
    th = saved;
    const double fd = (fp - fm) / 2e-5;
    worst = std::max(worst, std::abs(fd - ga.at(idx)));
    scale = std::max(scale, std::abs(fd));
  }
  CHECK(worst / scale < 1e-7);
}

TEST_CASE("batch gradient is the mean of per-example gradients") {
  const auto m = small_model(5);
  const std::vector<EncodedExample> batch = {encode_example(m.vocab, {"ab", "cde"}), encode_example(m.vocab, {"g", "fa b"})};
  const LossConfig cfg = LossConfig::defaults(Objective::tofu);
  auto both = Parameters::zeros(m.vocab_size(), m.shape);
  const double v = batch_loss(m, batch, cfg, &both);
  auto a = Parameters::zeros(m.vocab_size(), m.shape);
  auto b = Parameters::zeros(m.vocab_size(), m.shape);
  const double va = example_loss(m, batch[0], cfg, &a);
  const double vb = example_loss(m, batch[1], cfg, &b);
  CHECK_THAT(v, WithinAbs((va + vb) / 2, 1e-14));
  const auto fb = flatten(both);
  const auto fa = flatten(a);
  const auto fbb = flatten(b);
  for (std::size_t i = 0; i < fb.size(); ++i) CHECK_THAT(fb[i], WithinAbs((fa[i] + fbb[i]) / 2, 1e-14));
}

TEST_CASE("encode_example masks prompt positions") {
  const Vocab v("abc");
  const auto e = encode_example(v, {"ab", "c"});
  CHECK(e.tokens == std::vector<TokenId>{1, 2, 3, 0});
  CHECK(e.response_mask == std::vector<bool>{false, false, true, true});
}

TEST_CASE("example loss only sees response positions") {
  const auto m = small_model(7);
  const auto ex = encode_example(m.vocab, {"abc", "de"});
  const LossConfig cfg{Objective::ce};
  double manual = 0.0;
  for (std::size_t t = 3; t < ex.tokens.size(); ++t) {
    manual -= log_softmax(forward(m, std::span(ex.tokens).first(t)))[ex.tokens[t]];
  }
  CHECK_THAT(example_loss(m, ex, cfg), WithinAbs(manual / 3.0, 1e-14));
}

TEST_CASE("masked targets never change the loss or gradients") {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> n(0.0, 2.0);
  std::uniform_int_distribution<std::size_t> tok(0, 5);
  for (Objective o : kAllObjectives) {
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<LogitVector> z;
      std::vector<TargetSpec> q;
      std::vector<TargetSpec> q2;
      std::vector<bool> mask;
      for (int t = 0; t < 6; ++t) {
        std::vector<double> v(6);
        for (double& x : v) x = n(rng);
        z.emplace_back(v);
        q.push_back(TargetSpec::one_hot(tok(rng)));
        mask.push_back(t >= 2 || trial % 3 == 0);
        q2.push_back(mask.back() ? q.back() : TargetSpec::one_hot(tok(rng)));
      }
      const auto cfg = LossConfig::defaults(o);
      const auto a = sequence_loss(z, q, mask, cfg);
      const auto b = sequence_loss(z, q2, mask, cfg);
      CHECK(a.value == b.value);
      CHECK(a.grads == b.grads);
    }
  }
}

TEST_CASE("zero training steps leave the model unchanged") {
  const auto m = memorize_model();
  auto cfg = memorize_config();
  cfg.total_steps = 0;
  cfg.warmup_steps = 0;
  const auto r = train(m, memorize_corpus(), cfg);
  CHECK(r.checkpoint.model == m);
  CHECK(r.trace.empty());
}

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  c.learning_rate = 1.0;
  c.warmup_steps = 4;
  c.total_steps = 12;
  CHECK(c.lr_at(0) == 0.25);
  CHECK(c.lr_at(3) == 1.0);
  CHECK(c.lr_at(4) == 1.0);
  CHECK(c.lr_at(8) == 0.5);
  CHECK(c.lr_at(11) == 0.125);
  c.warmup_steps = 13;
  CHECK_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("CE memorizes a single example") {
  const auto r = train(memorize_model(), memorize_corpus(), memorize_config());
  REQUIRE(r.trace.size() == 2000);
  CHECK(r.trace.back().loss < 0.01);

  const auto& m = r.checkpoint.model;
  const auto ex = encode_example(m.vocab, memorize_corpus().examples[0]);
  for (std::size_t t = 6; t < ex.tokens.size(); ++t) {
    CHECK(log_softmax(forward(m, std::span(ex.tokens).first(t))).prob(ex.tokens[t]) > 0.99);
  }
  const auto probe = probe_token_distribution(m, "hello ", "w");
  CHECK(probe.valid_probs[0] > 0.99);

  // Loss never rises when averaged over any 200 consecutive steps.
  std::vector<double> prefix(1, 0.0);
  for (const auto& p : r.trace) prefix.push_back(prefix.back() + p.loss);
  for (std::size_t t = 0; t + 201 <= r.trace.size(); ++t) {
    const double now = (prefix[t + 200] - prefix[t]) / 200.0;
    const double next = (prefix[t + 201] - prefix[t + 1]) / 200.0;
    INFO("window starting at step " << t);
    CHECK(next <= now);
  }
}

TEST_CASE("training is deterministic") {
  const Corpus corpus{{{"ab", "cd"}, {"ba", "dc"}, {"a", "ggg"}}};
  TrainConfig c;
  c.total_steps = 60;
  c.warmup_steps = 10;
  c.batch_size = 2;
  c.momentum = 0.5;
  c.objective = LossConfig::defaults(Objective::tofu);
  const auto a = train(small_model(), corpus, c);
  const auto b = train(small_model(), corpus, c);
  CHECK(a.checkpoint == b.checkpoint);
  CHECK(serialize_checkpoint(a.checkpoint) == serialize_checkpoint(b.checkpoint));
  c.seed = 2;
  CHECK_FALSE(train(small_model(), corpus, c).checkpoint.model == a.checkpoint.model);
}

TEST_CASE("training rejects characters outside the vocabulary") {
  const Corpus corpus{{{"ab", "xyz"}}};
  CHECK_THROWS_AS(train(small_model(), corpus, TrainConfig{}), TokenizationError);
  CHECK_THROWS_AS(train(small_model(), Corpus{}, TrainConfig{}), ConfigError);
}

TEST_CASE("composite gradient check through the model") {
  const auto m = small_model(11);
  const Example ex{"abc", "defg"};
  for (Objective o : kAllObjectives) {
    INFO(to_string(o));
    CHECK(composite_gradient_check(m, ex, LossConfig::defaults(o), 0.05, 3) <= 1e-4);
  }
}

TEST_CASE("checkpoint round trip") {
  const Corpus corpus{{{"ab", "cd"}}};
  TrainConfig c;
  c.total_steps = 5;
  c.warmup_steps = 1;
  const auto r = train(small_model(), corpus, c, "abc123");
  const auto bytes = serialize_checkpoint(r.checkpoint);
  const auto back = deserialize_checkpoint(bytes);
  CHECK(back == r.checkpoint);
  CHECK(back.step == 5);
  CHECK(back.config_hash == "abc123");

  const auto path = fs::temp_directory_path() / "sftlab_test_ckpt.bin";
  save_checkpoint(r.checkpoint, path.string());
  CHECK(load_checkpoint(path.string()) == r.checkpoint);
  fs::remove(path);

  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), InvalidInput);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes + "x"), InvalidInput);
  CHECK_THROWS_AS(deserialize_checkpoint("NOTACKPT"), InvalidInput);
}

TEST_CASE("synthetic corpus matches its frequency table") {
  const std::vector<std::string> answers = {"1", "2", "3", "4", "5"};
  // Number of answers whose count falls outside 3 sigma of its expectation.
  auto outliers = [&](const std::vector<double>& freq, std::size_t n, std::uint64_t seed) {
    const auto s = synth_diversity_corpus({{"pick:", answers, freq}}, n, seed);
    REQUIRE(s.corpus.examples.size() == n);
    std::size_t out = 0;
    for (std::size_t i = 0; i < answers.size(); ++i) {
      const auto count = static_cast<double>(std::count_if(s.corpus.examples.begin(), s.corpus.examples.end(),
                                                           [&](const Example& e) { return e.response == answers[i]; }));
      const double sigma = std::sqrt(static_cast<double>(n) * freq[i] * (1 - freq[i]));
      if (std::abs(count - static_cast<double>(n) * freq[i]) > 3 * sigma) ++out;
    }
    return out;
  };
  // A 3-sigma band misses about 0.27% of the time, so over 100 (seed, answer)
  // cells more than 3 misses would point to a biased sampler.
  std::size_t misses = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) misses += outliers({0.2, 0.2, 0.2, 0.2, 0.2}, 20000, seed);
  CHECK(misses <= 3);
  CHECK(outliers({0.6, 0.2, 0.1, 0.06, 0.04}, 1000, 2) == 0);

  CHECK_THROWS_AS(synth_diversity_corpus({{"p", answers, {0.5, 0.5, 0.1, 0.0, 0.0}}}, 10, 1), ConfigError);
  CHECK_THROWS_AS(synth_diversity_corpus({{"p", answers, {0.5, 0.5}}}, 10, 1), ConfigError);
}

TEST_CASE("probe on a uniform model") {
  const auto zero16 = ToyModel::zeros(Vocab("12345:abcdefghi"), kSmall);
  REQUIRE(zero16.vocab_size() == 16);
  const auto r = probe_token_distribution(zero16, "a:", "12345");
  for (double p : r.valid_probs) CHECK_THAT(p, WithinAbs(1.0 / 16.0, 1e-15));
  CHECK_THAT(r.tail_mass, WithinAbs(11.0 / 16.0, 1e-15));
  const auto renorm = r.renormalized();
  for (double p : renorm.values()) CHECK_THAT(p, WithinAbs(0.2, 1e-15));
  CHECK_THROWS_AS(probe_token_distribution(zero16, "a:", "z"), TokenizationError);
}

TEST_CASE("logits after 100 steps match the recorded golden file") {
  const Corpus corpus{{{"ab:", "cab"}, {"ba:", "bca"}, {"cc:", "aa"}}};
  const auto vocab = Vocab::from_texts(corpus.texts());
  TrainConfig c;
  c.total_steps = 100;
  c.warmup_steps = 10;
  c.batch_size = 2;
  const auto r = train(ToyModel::init(vocab, kSmall, 42), corpus, c);
  std::ostringstream got;
  got.precision(17);
  for (const auto& ex : corpus.examples) {
    const auto z = forward(r.checkpoint.model, vocab.encode(ex.prompt));
    for (std::size_t i = 0; i < z.size(); ++i) got << (i ? " " : "") << z[i];
    got << "\n";
  }

  const fs::path golden = fs::path(SFTLAB_GOLDEN_DIR) / "toy_lm_step100_logits.txt";
  if (std::getenv("SFTLAB_WRITE_GOLDEN") != nullptr) {
    std::ofstream(golden) << got.str();
    SUCCEED("golden file written");
    return;
  }
  std::ifstream in(golden);
  REQUIRE(in.good());
  std::istringstream want_rows(std::string(std::istreambuf_iterator<char>(in), {}));
  std::istringstream got_rows(got.str());
  std::string want_line;
  std::string got_line;
  std::size_t rows = 0;
  while (std::getline(want_rows, want_line)) {
    REQUIRE(std::getline(got_rows, got_line));
    std::istringstream wl(want_line);
    std::istringstream gl(got_line);
    double w = 0.0;
    double g = 0.0;
    while (wl >> w) {
      REQUIRE(gl >> g);
      CHECK_THAT(g, WithinAbs(w, 1e-9));
    }
    ++rows;
  }
  CHECK(rows == corpus.examples.size());
}
