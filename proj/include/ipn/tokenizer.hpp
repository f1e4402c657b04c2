// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ipn/tensor.hpp"

namespace ipn {

/// Word-level tokenizer over the closed toy vocabulary. Ids 0..5 are the
/// special tokens; the remaining ids are the template words in sorted order.
class Tokenizer {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kSep = 3;
  static constexpr TokenId kImg = 4;
  static constexpr TokenId kImgD = 5;
  static constexpr int kNumSpecials = 6;

  /// Vocabulary of every word the toy-world templates can produce.
  static Tokenizer standard();
  explicit Tokenizer(std::vector<std::string> vocabulary);

  /// Splits on whitespace; '?', '.' and ':' are split off as their own
  /// tokens. Throws ContractError on out-of-vocabulary words or on text that
  /// spells a special token.
  std::vector<TokenId> encode(std::string_view text) const;
  /// Joins tokens with single spaces. Special tokens render as their names.
  std::string decode(std::span<const TokenId> ids) const;

  std::size_t size() const { return vocab_.size(); }
  const std::string& token(TokenId id) const;
  TokenId id(const std::string& word) const;
  bool is_special(TokenId id) const { return id >= 0 && id < kNumSpecials; }
  const std::vector<std::string>& vocabulary() const { return vocab_; }

  /// One token per line, line number = id.
  void save(const std::filesystem::path& path) const;
  static Tokenizer load(const std::filesystem::path& path);

 private:
  std::vector<std::string> vocab_;
  std::unordered_map<std::string, TokenId> index_;
};

}  // namespace ipn
