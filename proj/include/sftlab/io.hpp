#pragma once

// File formats: JSON-lines corpora, prompts, answers and generations; CSV loss
// traces and metric reports; content hashes.

#include <openssl/evp.h>

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "sftlab/error.hpp"
#include "sftlab/metrics.hpp"
#include "sftlab/toy_lm.hpp"

namespace sftlab {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open for writing: " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing: " + path.string());
}

inline std::string sha1_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
    throw Error("sha1 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

/// Same id `git hash-object` assigns to a file with these contents.
inline std::string git_blob_hash(std::string_view bytes) {
  std::string framed = "blob " + std::to_string(bytes.size());
  framed.push_back('\0');
  framed.append(bytes);
  return sha1_hex(framed);
}

/// Shortest decimal that round-trips to the same double.
inline std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

/// RFC 4180 quoting, applied only when needed.
inline std::string csv_field(std::string_view s) {
  if (s.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out.push_back('"');
    out.push_back(ch);
  }
  out.push_back('"');
  return out;
}

namespace detail {

template <typename F>
void for_each_json_line(const fs::path& path, F&& f) {
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    try {
      f(j);
    } catch (const json::exception& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

}  // namespace detail

/// Lines of {"prompt": ..., "response": ...}.
inline Corpus read_corpus(const fs::path& path) {
  Corpus c;
  detail::for_each_json_line(path, [&](const json& j) {
    c.examples.push_back({j.at("prompt").get<std::string>(), j.at("response").get<std::string>()});
  });
  if (c.examples.empty()) throw ConfigError("corpus is empty: " + path.string());
  return c;
}

inline std::string corpus_jsonl(const Corpus& c) {
  std::string out;
  for (const auto& ex : c.examples) out += json{{"prompt", ex.prompt}, {"response", ex.response}}.dump() + "\n";
  return out;
}

struct PromptEntry {
  std::string prompt_id;
  std::string prompt;
};

/// Lines of {"prompt_id": ..., "prompt": ...}.
inline std::vector<PromptEntry> read_prompts(const fs::path& path) {
  std::vector<PromptEntry> out;
  detail::for_each_json_line(path, [&](const json& j) {
    out.push_back({j.at("prompt_id").get<std::string>(), j.at("prompt").get<std::string>()});
  });
  if (out.empty()) throw ConfigError("prompts file is empty: " + path.string());
  return out;
}

/// Lines of {"prompt_id": ..., "answer": ...}.
inline std::map<std::string, std::string> read_answers(const fs::path& path) {
  std::map<std::string, std::string> out;
  detail::for_each_json_line(path, [&](const json& j) {
    out[j.at("prompt_id").get<std::string>()] = j.at("answer").get<std::string>();
  });
  return out;
}

inline std::string generations_jsonl(const std::vector<GenerationSet>& sets) {
  std::string out;
  for (const auto& s : sets) {
    for (std::size_t i = 0; i < s.completions.size(); ++i) {
      json j;
      j["prompt_id"] = s.prompt_id;
      j["completion"] = s.completions[i];
      j["sample_index"] = i;
      out += j.dump() + "\n";
    }
  }
  return out;
}

inline std::string loss_trace_csv(const std::vector<LossTracePoint>& trace) {
  std::string out = "step,loss,lr\n";
  for (const auto& p : trace) {
    out += std::to_string(p.step) + "," + format_double(p.loss) + "," + format_double(p.lr) + "\n";
  }
  return out;
}

/// metric,prompt_id,value rows followed by __mean__ and __std__ aggregates.
inline std::string metric_csv(const std::vector<MetricReport>& reports) {
  std::string out = "metric,prompt_id,value\n";
  for (const auto& r : reports) {
    for (const auto& [id, v] : r.per_prompt) out += r.metric + "," + csv_field(id) + "," + format_double(v) + "\n";
    out += r.metric + ",__mean__," + format_double(r.mean) + "\n";
    out += r.metric + ",__std__," + format_double(r.stddev) + "\n";
  }
  return out;
}

}  // namespace sftlab
