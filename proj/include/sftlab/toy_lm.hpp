#pragma once

// Character-level fixed-window MLP language model with manual backprop.
//
//   context (c tokens, left-padded with EOS)
//     -> concatenated embeddings x (c*d)
//     -> a = tanh(x W1 + b1)          (h)
//     -> logits = a W2 + b2           (V)
//
// Token 0 is the reserved end-of-sequence symbol; it also pads short contexts.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sftlab/error.hpp"
#include "sftlab/gradcheck.hpp"
#include "sftlab/losses.hpp"
#include "sftlab/numeric.hpp"

namespace sftlab {

using TokenId = std::uint32_t;

class Vocab {
 public:
  static constexpr TokenId kEos = 0;
  static constexpr std::size_t kMaxSize = 512;

  Vocab() = default;

  /// `symbols` must be distinct; symbol i gets token id i + 1.
  explicit Vocab(std::string symbols) : symbols_(std::move(symbols)) {
    std::string sorted = symbols_;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw ConfigError("vocab symbols must be distinct");
    }
    if (size() > kMaxSize) throw ConfigError("vocab larger than 512");
    lookup_.fill(-1);
    for (std::size_t i = 0; i < symbols_.size(); ++i) {
      lookup_[static_cast<unsigned char>(symbols_[i])] = static_cast<int>(i + 1);
    }
  }

  /// Sorted distinct characters of all `texts`.
  static Vocab from_texts(std::span<const std::string> texts) {
    std::array<bool, 256> seen{};
    for (const auto& t : texts) {
      for (char ch : t) seen[static_cast<unsigned char>(ch)] = true;
    }
    std::string symbols;
    for (std::size_t c = 0; c < seen.size(); ++c) {
      if (seen[c]) symbols.push_back(static_cast<char>(c));
    }
    return Vocab(std::move(symbols));
  }

  std::size_t size() const noexcept { return symbols_.size() + 1; }
  const std::string& symbols() const noexcept { return symbols_; }

  TokenId encode(char ch) const {
    const int id = lookup_[static_cast<unsigned char>(ch)];
    if (id < 0) throw TokenizationError(std::string("character '") + ch + "' is not in the vocabulary");
    return static_cast<TokenId>(id);
  }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> ids;
    ids.reserve(text.size());
    for (char ch : text) ids.push_back(encode(ch));
    return ids;
  }

  bool contains(char ch) const noexcept { return lookup_[static_cast<unsigned char>(ch)] >= 0; }

  /// Decodes up to (not including) the first EOS.
  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    for (TokenId id : ids) {
      if (id == kEos) break;
      out.push_back(symbol(id));
    }
    return out;
  }

  char symbol(TokenId id) const {
    if (id == kEos || id >= size()) throw InvalidInput("token id has no printable symbol");
    return symbols_[id - 1];
  }

  bool operator==(const Vocab& other) const { return symbols_ == other.symbols_; }

 private:
  std::string symbols_;
  std::array<int, 256> lookup_{};
};

struct ModelShape {
  std::size_t embed_dim = 32;
  std::size_t hidden_dim = 128;
  std::size_t context = 8;

  bool operator==(const ModelShape&) const = default;
};

/// Parameter (or gradient) tensors, all row-major.
struct Parameters {
  std::vector<double> embed;     // V x d
  std::vector<double> hidden_w;  // (c*d) x h
  std::vector<double> hidden_b;  // h
  std::vector<double> output_w;  // h x V
  std::vector<double> output_b;  // V

  static Parameters zeros(std::size_t vocab, const ModelShape& s) {
    Parameters p;
    p.embed.assign(vocab * s.embed_dim, 0.0);
    p.hidden_w.assign(s.context * s.embed_dim * s.hidden_dim, 0.0);
    p.hidden_b.assign(s.hidden_dim, 0.0);
    p.output_w.assign(s.hidden_dim * vocab, 0.0);
    p.output_b.assign(vocab, 0.0);
    return p;
  }

  std::array<std::vector<double>*, 5> tensors() { return {&embed, &hidden_w, &hidden_b, &output_w, &output_b}; }
  std::array<const std::vector<double>*, 5> tensors() const {
    return {&embed, &hidden_w, &hidden_b, &output_w, &output_b};
  }
  // Weight matrices receive weight decay; biases do not.
  static constexpr std::array<bool, 5> kDecayed = {true, true, false, true, false};

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto* t : tensors()) n += t->size();
    return n;
  }

  double& at(std::size_t flat) {
    for (auto* t : tensors()) {
      if (flat < t->size()) return (*t)[flat];
      flat -= t->size();
    }
    throw InvalidInput("parameter index out of range");
  }

  void scale(double s) {
    for (auto* t : tensors()) {
      for (double& x : *t) x *= s;
    }
  }

  bool operator==(const Parameters&) const = default;
};

struct ToyModel {
  Vocab vocab;
  ModelShape shape;
  Parameters params;

  static ToyModel zeros(Vocab vocab, ModelShape shape) {
    ToyModel m{std::move(vocab), shape, {}};
    m.params = Parameters::zeros(m.vocab.size(), shape);
    return m;
  }

  /// Gaussian init with std 1/sqrt(fan_in); embeddings are one-hot lookups
  /// (fan_in 1); biases start at zero.
  static ToyModel init(Vocab vocab, ModelShape shape, std::uint64_t seed) {
    ToyModel m = zeros(std::move(vocab), shape);
    std::mt19937_64 rng(seed);
    auto fill = [&rng](std::vector<double>& t, double std_dev) {
      std::normal_distribution<double> normal(0.0, std_dev);
      for (double& x : t) x = normal(rng);
    };
    fill(m.params.embed, 1.0);
    fill(m.params.hidden_w, 1.0 / std::sqrt(static_cast<double>(shape.context * shape.embed_dim)));
    fill(m.params.output_w, 1.0 / std::sqrt(static_cast<double>(shape.hidden_dim)));
    return m;
  }

  std::size_t vocab_size() const noexcept { return vocab.size(); }

  void validate() const {
    if (shape.embed_dim == 0 || shape.hidden_dim == 0 || shape.context == 0) {
      throw ConfigError("model dimensions must be positive");
    }
    const auto expected = Parameters::zeros(vocab.size(), shape);
    const auto have = params.tensors();
    const auto want = expected.tensors();
    for (std::size_t i = 0; i < have.size(); ++i) {
      if (have[i]->size() != want[i]->size()) throw ConfigError("parameter tensor has inconsistent size");
      for (double x : *have[i]) {
        if (!std::isfinite(x)) throw InvalidInput("non-finite model parameter");
      }
    }
  }

  bool operator==(const ToyModel& o) const { return vocab == o.vocab && shape == o.shape && params == o.params; }
};

// ---------------------------------------------------------------------------
// Forward / backward

struct ForwardCache {
  std::vector<TokenId> window;  // exactly `context` ids
  std::vector<double> hidden;   // tanh activations
  std::vector<double> logits;
};

/// Last `context` tokens of `history`, left-padded with EOS.
inline std::vector<TokenId> context_window(std::span<const TokenId> history, std::size_t context) {
  std::vector<TokenId> window(context, Vocab::kEos);
  const std::size_t take = std::min(context, history.size());
  std::copy(history.end() - static_cast<std::ptrdiff_t>(take), history.end(), window.end() - static_cast<std::ptrdiff_t>(take));
  return window;
}

inline ForwardCache forward_cached(const ToyModel& m, std::span<const TokenId> history) {
  const auto& s = m.shape;
  const std::size_t v = m.vocab_size();
  const auto& p = m.params;
  ForwardCache c;
  c.window = context_window(history, s.context);
  for (TokenId id : c.window) {
    if (id >= v) throw TokenizationError("token id " + std::to_string(id) + " outside vocabulary");
  }

  c.hidden.assign(p.hidden_b.begin(), p.hidden_b.end());
  for (std::size_t slot = 0; slot < s.context; ++slot) {
    const double* emb = &p.embed[c.window[slot] * s.embed_dim];
    for (std::size_t e = 0; e < s.embed_dim; ++e) {
      const double x = emb[e];
      const double* row = &p.hidden_w[(slot * s.embed_dim + e) * s.hidden_dim];
      for (std::size_t u = 0; u < s.hidden_dim; ++u) c.hidden[u] += x * row[u];
    }
  }
  for (double& a : c.hidden) a = std::tanh(a);

  c.logits.assign(p.output_b.begin(), p.output_b.end());
  for (std::size_t u = 0; u < s.hidden_dim; ++u) {
    const double a = c.hidden[u];
    const double* row = &p.output_w[u * v];
    for (std::size_t t = 0; t < v; ++t) c.logits[t] += a * row[t];
  }
  return c;
}

inline LogitVector forward(const ToyModel& m, std::span<const TokenId> history) {
  return LogitVector(forward_cached(m, history).logits);
}

/// Adds scale * d(loss)/d(params) into `grads`, given d(loss)/d(logits).
inline void accumulate_backward(const ToyModel& m, const ForwardCache& c, std::span<const double> dlogits,
                                Parameters& grads, double scale = 1.0) {
  const auto& s = m.shape;
  const std::size_t v = m.vocab_size();
  const auto& p = m.params;
  if (dlogits.size() != v) throw InvalidInput("backward: gradient length does not match vocab");
  for (double g : dlogits) {
    if (!std::isfinite(g)) throw InvalidInput("backward: non-finite logit gradient");
  }

  std::vector<double> dhidden(s.hidden_dim, 0.0);
  for (std::size_t t = 0; t < v; ++t) grads.output_b[t] += scale * dlogits[t];
  for (std::size_t u = 0; u < s.hidden_dim; ++u) {
    const double a = c.hidden[u];
    const double* row = &p.output_w[u * v];
    double* grow = &grads.output_w[u * v];
    double acc = 0.0;
    for (std::size_t t = 0; t < v; ++t) {
      grow[t] += scale * a * dlogits[t];
      acc += row[t] * dlogits[t];
    }
    dhidden[u] = acc * (1.0 - a * a);  // through tanh
  }

  for (std::size_t u = 0; u < s.hidden_dim; ++u) grads.hidden_b[u] += scale * dhidden[u];
  for (std::size_t slot = 0; slot < s.context; ++slot) {
    const std::size_t base = c.window[slot] * s.embed_dim;
    for (std::size_t e = 0; e < s.embed_dim; ++e) {
      const double x = p.embed[base + e];
      const std::size_t r = (slot * s.embed_dim + e) * s.hidden_dim;
      const double* row = &p.hidden_w[r];
      double* grow = &grads.hidden_w[r];
      double dx = 0.0;
      for (std::size_t u = 0; u < s.hidden_dim; ++u) {
        grow[u] += scale * x * dhidden[u];
        dx += row[u] * dhidden[u];
      }
      grads.embed[base + e] += scale * dx;
    }
  }
}

inline Parameters backward(const ToyModel& m, std::span<const TokenId> history, std::span<const double> dlogits) {
  auto grads = Parameters::zeros(m.vocab_size(), m.shape);
  accumulate_backward(m, forward_cached(m, history), dlogits, grads);
  return grads;
}

// ---------------------------------------------------------------------------
// Corpora and per-example loss

struct Example {
  std::string prompt;
  std::string response;

  bool operator==(const Example&) const = default;
};

struct Corpus {
  std::vector<Example> examples;

  void validate(const Vocab& vocab) const {
    if (examples.empty()) throw ConfigError("corpus is empty");
    for (const auto& ex : examples) {
      for (char ch : ex.prompt + ex.response) {
        if (!vocab.contains(ch)) throw TokenizationError(std::string("corpus character '") + ch + "' not in vocabulary");
      }
    }
  }

  std::vector<std::string> texts() const {
    std::vector<std::string> out;
    for (const auto& ex : examples) {
      out.push_back(ex.prompt);
      out.push_back(ex.response);
    }
    return out;
  }
};

/// Token sequence prompt + response + EOS with a mask selecting the positions
/// whose targets belong to the response (including the closing EOS).
struct EncodedExample {
  std::vector<TokenId> tokens;
  std::vector<bool> response_mask;
};

inline EncodedExample encode_example(const Vocab& vocab, const Example& ex) {
  EncodedExample e;
  e.tokens = vocab.encode(ex.prompt);
  const auto response = vocab.encode(ex.response);
  e.response_mask.assign(e.tokens.size(), false);
  e.tokens.insert(e.tokens.end(), response.begin(), response.end());
  e.tokens.push_back(Vocab::kEos);
  e.response_mask.resize(e.tokens.size(), true);
  return e;
}

/// Mean response-token loss of one example; when `grads` is given, adds
/// `scale` times the parameter gradient into it. Prompt positions are never
/// run through the network since their targets carry no loss.
inline double example_loss(const ToyModel& m, const EncodedExample& ex, const LossConfig& cfg,
                           Parameters* grads = nullptr, double scale = 1.0) {
  std::vector<ForwardCache> caches;
  std::vector<LogitVector> logits;
  std::vector<TargetSpec> targets;
  for (std::size_t t = 0; t < ex.tokens.size(); ++t) {
    if (!ex.response_mask[t]) continue;
    caches.push_back(forward_cached(m, std::span(ex.tokens).first(t)));
    logits.emplace_back(caches.back().logits);
    targets.push_back(TargetSpec::one_hot(ex.tokens[t]));
  }
  const auto loss = sequence_loss(logits, targets, std::vector<bool>(logits.size(), true), cfg);
  if (grads != nullptr) {
    for (std::size_t i = 0; i < caches.size(); ++i) accumulate_backward(m, caches[i], loss.grads[i], *grads, scale);
  }
  return loss.value;
}

/// Mean of per-example losses over a batch; gradient likewise averaged.
inline double batch_loss(const ToyModel& m, std::span<const EncodedExample> batch, const LossConfig& cfg,
                         Parameters* grads = nullptr) {
  if (batch.empty()) throw InvalidInput("batch_loss: empty batch");
  const double inv = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& ex : batch) total += example_loss(m, ex, cfg, grads, inv) * inv;
  return total;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  LossConfig objective = LossConfig::defaults(Objective::ce);
  double learning_rate = 0.1;
  std::size_t warmup_steps = 50;
  std::size_t total_steps = 1000;
  double weight_decay = 0.01;
  std::size_t batch_size = 8;
  double momentum = 0.0;
  std::uint64_t seed = 1;

  void validate() const {
    objective.validate();
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
    if (warmup_steps > total_steps) throw ConfigError("warmup_steps exceeds total_steps");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  }

  /// Linear warmup to the peak over `warmup_steps`, then linear decay that
  /// reaches zero at `total_steps`. `step` is 0-based.
  double lr_at(std::size_t step) const {
    if (step < warmup_steps) {
      return learning_rate * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    }
    return learning_rate * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup_steps);
  }
};

struct LossTracePoint {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct Checkpoint {
  ToyModel model;
  std::uint64_t step = 0;
  std::string config_hash;
  std::string rng_state;

  bool operator==(const Checkpoint&) const = default;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LossTracePoint> trace;
};

inline std::string rng_state_string(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

/// Mini-batch SGD with optional momentum and decoupled weight decay. Batches
/// are drawn from a seeded per-epoch shuffle; accumulation order is fixed, so
/// (model, corpus, cfg) determine every output bit.
inline TrainResult train(ToyModel model, const Corpus& corpus, const TrainConfig& cfg, std::string config_hash = {}) {
  cfg.validate();
  model.validate();
  corpus.validate(model.vocab);

  std::vector<EncodedExample> encoded;
  encoded.reserve(corpus.examples.size());
  for (const auto& ex : corpus.examples) encoded.push_back(encode_example(model.vocab, ex));

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(encoded.size());
  std::size_t cursor = order.size();

  auto velocity = Parameters::zeros(model.vocab_size(), model.shape);
  TrainResult result;
  result.trace.reserve(cfg.total_steps);
  std::vector<EncodedExample> batch;
  for (std::size_t step = 0; step < cfg.total_steps; ++step) {
    batch.clear();
    while (batch.size() < cfg.batch_size) {
      if (cursor == order.size()) {
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(encoded[order[cursor++]]);
    }

    auto grads = Parameters::zeros(model.vocab_size(), model.shape);
    double loss = 0.0;
    try {
      loss = batch_loss(model, batch, cfg.objective, &grads);
    } catch (const InvalidInput& e) {
      // Tokens were validated up front, so this is an overflowing forward pass.
      if (step == 0) throw;
      throw Divergence(std::string("forward pass overflowed at step ") + std::to_string(step) + ": " + e.what(), step);
    }
    if (!std::isfinite(loss)) {
      throw Divergence("training loss became non-finite at step " + std::to_string(step), step);
    }
    const double lr = cfg.lr_at(step);
    result.trace.push_back({step, loss, lr});

    auto params = model.params.tensors();
    auto g = grads.tensors();
    auto vel = velocity.tensors();
    for (std::size_t k = 0; k < params.size(); ++k) {
      const double decay = Parameters::kDecayed[k] ? cfg.weight_decay : 0.0;
      auto& theta = *params[k];
      auto& v = *vel[k];
      const auto& d = *g[k];
      for (std::size_t i = 0; i < theta.size(); ++i) {
        v[i] = cfg.momentum * v[i] + d[i];
        theta[i] -= lr * (v[i] + decay * theta[i]);
        if (!std::isfinite(theta[i])) {
          throw Divergence("parameters became non-finite at step " + std::to_string(step), step);
        }
      }
    }
  }

  result.checkpoint = Checkpoint{std::move(model), cfg.total_steps, std::move(config_hash), rng_state_string(rng)};
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint serialization: little-endian binary container.
//
//   "SFTLCKPT" | u32 version | u64 step | str config_hash | str rng_state |
//   str vocab symbols | u64 d | u64 h | u64 c | 5 x (u64 n | n x f64)
//
// str = u64 length followed by raw bytes.

inline constexpr char kCheckpointMagic[8] = {'S', 'F', 'T', 'L', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

inline void put_str(std::string& out, const std::string& s) {
  put<std::uint64_t>(out, s.size());
  out += s;
}

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  std::string get_str() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }

  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw InvalidInput("checkpoint: truncated data");
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put(out, kCheckpointVersion);
  detail::put<std::uint64_t>(out, ck.step);
  detail::put_str(out, ck.config_hash);
  detail::put_str(out, ck.rng_state);
  detail::put_str(out, ck.model.vocab.symbols());
  detail::put<std::uint64_t>(out, ck.model.shape.embed_dim);
  detail::put<std::uint64_t>(out, ck.model.shape.hidden_dim);
  detail::put<std::uint64_t>(out, ck.model.shape.context);
  for (const auto* t : ck.model.params.tensors()) {
    detail::put<std::uint64_t>(out, t->size());
    out.append(reinterpret_cast<const char*>(t->data()), t->size() * sizeof(double));
  }
  return out;
}

inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw InvalidInput("checkpoint: bad magic");
  }
  detail::Reader r(bytes.substr(sizeof(kCheckpointMagic)));
  if (const auto version = r.get<std::uint32_t>(); version != kCheckpointVersion) {
    throw InvalidInput("checkpoint: unsupported version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.step = r.get<std::uint64_t>();
  ck.config_hash = r.get_str();
  ck.rng_state = r.get_str();
  ck.model.vocab = Vocab(r.get_str());
  ck.model.shape.embed_dim = r.get<std::uint64_t>();
  ck.model.shape.hidden_dim = r.get<std::uint64_t>();
  ck.model.shape.context = r.get<std::uint64_t>();
  for (auto* t : ck.model.params.tensors()) {
    t->resize(r.get<std::uint64_t>());
    for (double& x : *t) x = r.get<double>();
  }
  if (!r.done()) throw InvalidInput("checkpoint: trailing bytes");
  ck.model.validate();
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open checkpoint for writing: " + path);
  const auto bytes = serialize_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

// ---------------------------------------------------------------------------
// Synthetic diversity corpora and the first-token probe

struct PromptFrequencies {
  std::string prompt;
  std::vector<std::string> responses;
  std::vector<double> frequencies;
};

using FrequencyTable = std::vector<PromptFrequencies>;

inline void validate_frequency_table(const FrequencyTable& table) {
  if (table.empty()) throw ConfigError("frequency table is empty");
  for (const auto& row : table) {
    if (row.responses.empty() || row.responses.size() != row.frequencies.size()) {
      throw ConfigError("frequency table row for '" + row.prompt + "' has mismatched responses/frequencies");
    }
    double total = 0.0;
    for (double f : row.frequencies) {
      if (!(f >= 0.0) || !std::isfinite(f)) throw ConfigError("frequency table has a negative entry");
      total += f;
    }
    if (std::abs(total - 1.0) > 1e-9) {
      throw ConfigError("frequencies for '" + row.prompt + "' sum to " + std::to_string(total));
    }
  }
}

struct SynthCorpus {
  Corpus corpus;
  FrequencyTable truth;
};

/// Draws `samples_per_prompt` responses for every prompt from its frequency row.
inline SynthCorpus synth_diversity_corpus(const FrequencyTable& table, std::size_t samples_per_prompt,
                                          std::uint64_t seed) {
  validate_frequency_table(table);
  std::mt19937_64 rng(seed);
  SynthCorpus out{{}, table};
  for (const auto& row : table) {
    std::discrete_distribution<std::size_t> pick(row.frequencies.begin(), row.frequencies.end());
    for (std::size_t i = 0; i < samples_per_prompt; ++i) {
      out.corpus.examples.push_back({row.prompt, row.responses[pick(rng)]});
    }
  }
  return out;
}

struct ProbeResult {
  std::string valid_tokens;
  std::vector<double> valid_probs;
  double tail_mass = 0.0;

  /// Valid-token probabilities followed by the tail mass.
  ProbVector with_tail() const {
    auto v = valid_probs;
    v.push_back(tail_mass);
    return ProbVector(detail::unchecked, std::move(v));
  }

  /// Valid-token probabilities renormalized to sum to one.
  ProbVector renormalized() const {
    double total = 0.0;
    for (double p : valid_probs) total += p;
    auto v = valid_probs;
    for (double& p : v) p /= total;
    return ProbVector(detail::unchecked, std::move(v));
  }
};

/// Next-token distribution right after `prompt`, split into the listed valid
/// tokens and the mass of everything else.
inline ProbeResult probe_token_distribution(const ToyModel& m, std::string_view prompt, std::string_view valid_tokens) {
  const auto history = m.vocab.encode(prompt);
  const auto l = log_softmax(forward(m, history));
  ProbeResult r;
  r.valid_tokens = std::string(valid_tokens);
  double valid_total = 0.0;
  for (char ch : valid_tokens) {
    const double p = l.prob(m.vocab.encode(ch));
    r.valid_probs.push_back(p);
    valid_total += p;
  }
  r.tail_mass = std::max(0.0, 1.0 - valid_total);
  return r;
}

// ---------------------------------------------------------------------------
// End-to-end gradient check

/// Compares the backprop gradient of one example's loss with central
/// differences on a random `fraction` of the parameters. Detached quantities
/// are frozen at the unperturbed forward pass. Returns the relative error.
inline double composite_gradient_check(const ToyModel& m, const Example& example, const LossConfig& cfg,
                                       double fraction, std::uint64_t seed, double step = 1e-5) {
  const auto ex = encode_example(m.vocab, example);
  auto analytic = Parameters::zeros(m.vocab_size(), m.shape);
  example_loss(m, ex, cfg, &analytic);

  std::size_t length = 0;
  for (bool b : ex.response_mask) length += b ? 1 : 0;
  std::vector<ValueFn> frozen(ex.tokens.size());
  std::size_t position = 0;
  for (std::size_t t = 0; t < ex.tokens.size(); ++t) {
    if (!ex.response_mask[t]) continue;
    frozen[t] = frozen_value_fn(cfg, forward(m, std::span(ex.tokens).first(t)), TargetSpec::one_hot(ex.tokens[t]),
                                ++position, length);
  }
  auto value = [&](const ToyModel& model) {
    double v = 0.0;
    for (std::size_t t = 0; t < ex.tokens.size(); ++t) {
      if (ex.response_mask[t]) v += frozen[t](forward(model, std::span(ex.tokens).first(t)));
    }
    return v / static_cast<double>(length);
  };

  std::mt19937_64 rng(seed);
  const std::size_t total = m.params.count();
  const std::size_t samples = std::max<std::size_t>(1, static_cast<std::size_t>(fraction * static_cast<double>(total)));
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  std::vector<double> a;
  std::vector<double> b;
  ToyModel probe = m;
  for (std::size_t s = 0; s < samples; ++s) {
    const std::size_t idx = pick(rng);
    double& theta = probe.params.at(idx);
    const double saved = theta;
    theta = saved + step;
    const double fp = value(probe);
    theta = saved - step;
    const double fm = value(probe);
    theta = saved;
    b.push_back((fp - fm) / (2.0 * step));
    a.push_back(analytic.at(idx));
  }
  return relative_error(b, a);
}

}  // namespace sftlab
