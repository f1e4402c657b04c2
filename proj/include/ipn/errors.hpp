// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace ipn {

/// Violated precondition or API contract. Maps to CLI exit code 1.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Shape mismatch inside a tensor primitive.
class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Malformed persisted input (JSONL corpus, config file, vocabulary).
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Checkpoint could not be read back faithfully.
class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { kIo, kMagic, kVersion, kTruncated, kDigest, kMismatch };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// A training or pretraining run did not reach its required quality bar.
/// Carries the measured curve so callers can persist it. Maps to exit code 2.
class ThresholdError : public std::runtime_error {
 public:
  ThresholdError(const std::string& what, std::vector<double> curve)
      : std::runtime_error(what), curve_(std::move(curve)) {}
  const std::vector<double>& curve() const { return curve_; }

 private:
  std::vector<double> curve_;
};

/// Training stopped on a non-finite loss; parameters were rolled back to the
/// last finite step. Maps to exit code 2.
class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ipn
