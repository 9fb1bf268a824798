#pragma once

#include <stdexcept>
#include <string>

namespace sftlab {

// Base of every error raised by the library. Callers that only care about
// "something was wrong with the request" catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed numeric input (non-finite logits, bad distributions, index out of range).
class InvalidInput : public Error {
 public:
  using Error::Error;
};

// Hyperparameter outside its mathematical domain (beta <= 0, gamma < 0, ...).
class DomainError : public Error {
 public:
  using Error::Error;
};

// Inconsistent configuration: derived lambda-PR threshold out of range, unknown
// keys, vocabulary mismatch between runs.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Objective that is only defined for one-hot targets was given a soft target.
class UnsupportedTarget : public Error {
 public:
  using Error::Error;
};

// Every position of a sequence was masked out.
class EmptyResponse : public Error {
 public:
  using Error::Error;
};

// Too few items for a metric (k < 2 for Self-BLEU, empty success matrix).
class ArityError : public Error {
 public:
  using Error::Error;
};

// Metric whose denominator is zero (distinct-n over empty completions).
class UndefinedMetric : public Error {
 public:
  using Error::Error;
};

// Character outside the model vocabulary.
class TokenizationError : public Error {
 public:
  using Error::Error;
};

// Finite-difference oracle hit a non-finite evaluation.
class OracleFailure : public Error {
 public:
  OracleFailure(const std::string& what, std::size_t component)
      : Error(what), component_(component) {}
  std::size_t component() const noexcept { return component_; }

 private:
  std::size_t component_;
};

// Training loss became non-finite.
class Divergence : public Error {
 public:
  Divergence(const std::string& what, std::size_t step) : Error(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

// Bad command-line usage; maps to exit code 2.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace sftlab
