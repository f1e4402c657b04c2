// Copyright 2026 The IPN Authors
// SPDX-License-Identifier: Apache-2.0

#include "ipn/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "ipn/data.hpp"

namespace ipn {

namespace {

constexpr std::array<std::string_view, Tokenizer::kNumSpecials> kSpecials = {
    "<pad>", "<bos>", "<eos>", "<sep>", "<img>", "<img-d>"};

constexpr std::string_view kTemplateWords =
    "a and at row column what color is the how many are there yes no where describe image in "
    "detail . ? true or false : which caption matches";

bool is_split_punct(char c) { return c == '?' || c == '.' || c == ':'; }

}  // namespace

Tokenizer Tokenizer::standard() {
  std::set<std::string> words;
  auto add_all = [&](std::string_view text) {
    std::size_t pos = 0;
    while (pos < text.size()) {
      const auto end = text.find(' ', pos);
      const auto stop = end == std::string_view::npos ? text.size() : end;
      if (stop > pos) words.emplace(text.substr(pos, stop - pos));
      pos = stop + 1;
    }
  };
  add_all(kTemplateWords);
  for (auto s : kShapeNames) {
    words.emplace(s);
    words.emplace(std::string(s) + "s");
  }
  for (auto c : kColorNames) words.emplace(c);
  for (auto w : kCountWords) words.emplace(w);
  for (auto l : kChoiceLetters) words.emplace(l);
  std::vector<std::string> vocab(kSpecials.begin(), kSpecials.end());
  vocab.insert(vocab.end(), words.begin(), words.end());
  return Tokenizer(std::move(vocab));
}

Tokenizer::Tokenizer(std::vector<std::string> vocabulary) : vocab_(std::move(vocabulary)) {
  if (vocab_.size() < kSpecials.size() ||
      !std::equal(kSpecials.begin(), kSpecials.end(), vocab_.begin())) {
    throw ContractError("Tokenizer: vocabulary must start with the six special tokens");
  }
  for (std::size_t i = 0; i < vocab_.size(); ++i) {
    if (!index_.emplace(vocab_[i], static_cast<TokenId>(i)).second) {
      throw ContractError("Tokenizer: duplicate token '" + vocab_[i] + "'");
    }
  }
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> out;
  std::string word;
  auto flush = [&] {
    if (word.empty()) return;
    const auto it = index_.find(word);
    if (it == index_.end()) throw ContractError("Tokenizer: unknown word '" + word + "'");
    if (is_special(it->second)) {
      throw ContractError("Tokenizer: special token '" + word + "' in plain text");
    }
    out.push_back(it->second);
    word.clear();
  };
  for (char c : text) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
      flush();
    } else if (is_split_punct(c)) {
      flush();
      word = c;
      flush();
    } else {
      word += c;
    }
  }
  flush();
  return out;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (!out.empty()) out += ' ';
    out += token(id);
  }
  return out;
}

const std::string& Tokenizer::token(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
    throw ContractError("Tokenizer: id " + std::to_string(id) + " out of range");
  }
  return vocab_[id];
}

TokenId Tokenizer::id(const std::string& word) const {
  const auto it = index_.find(word);
  if (it == index_.end()) throw ContractError("Tokenizer: unknown word '" + word + "'");
  return it->second;
}

void Tokenizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ContractError("cannot write " + path.string());
  for (const auto& w : vocab_) out << w << '\n';
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ContractError("cannot open " + path.string());
  std::vector<std::string> vocab;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line.find(' ') != std::string::npos) {
      throw ParseError("vocabulary entries must be single non-empty words", lineno);
    }
    vocab.push_back(line);
  }
  return Tokenizer(std::move(vocab));
}

}  // namespace ipn
