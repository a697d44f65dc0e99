#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "knnmt/vocab.hpp"

namespace knnmt {

struct SentencePair {
  std::vector<TokenId> source;
  std::vector<TokenId> target;  // always ends with eos
};

// Token-id parallel corpus over a fixed vocabulary.
class ParallelCorpus {
 public:
  ParallelCorpus() = default;
  // Validates ids against `vocab_size`; appends eos to targets that lack it.
  ParallelCorpus(std::string name, std::vector<SentencePair> pairs, std::size_t vocab_size);

  static ParallelCorpus encode(std::string name, std::span<const RawPair> raw, const Vocab& vocab);

  const std::string& name() const { return name_; }
  std::size_t size() const { return pairs_.size(); }
  bool empty() const { return pairs_.empty(); }
  const SentencePair& operator[](std::size_t i) const { return pairs_.at(i); }
  const std::vector<SentencePair>& pairs() const { return pairs_; }

  std::size_t target_token_count() const;

 private:
  std::string name_;
  std::vector<SentencePair> pairs_;
};

// One pair per line: source TAB target.
std::vector<RawPair> read_tsv(const std::filesystem::path& path);
void write_tsv(const std::filesystem::path& path, std::span<const RawPair> pairs);

}  // namespace knnmt
