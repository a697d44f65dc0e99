#include "knnmt/corpus.hpp"

#include <fstream>

namespace knnmt {

ParallelCorpus::ParallelCorpus(std::string name, std::vector<SentencePair> pairs,
                               std::size_t vocab_size)
    : name_(std::move(name)), pairs_(std::move(pairs)) {
  for (std::size_t i = 0; i < pairs_.size(); ++i) {
    auto& p = pairs_[i];
    if (p.source.empty()) throw InvalidArgument("pair " + std::to_string(i) + ": empty source");
    if (p.target.empty() || p.target.back() != Vocab::kEos) p.target.push_back(Vocab::kEos);
    for (const auto* seq : {&p.source, &p.target}) {
      for (TokenId t : *seq) {
        if (t >= vocab_size) {
          throw InvalidArgument("pair " + std::to_string(i) + ": token id " + std::to_string(t) +
                                " >= vocab size " + std::to_string(vocab_size));
        }
      }
    }
  }
}

ParallelCorpus ParallelCorpus::encode(std::string name, std::span<const RawPair> raw,
                                      const Vocab& vocab) {
  std::vector<SentencePair> pairs;
  pairs.reserve(raw.size());
  for (const auto& [src, tgt] : raw) pairs.push_back({vocab.encode(src), vocab.encode(tgt)});
  return ParallelCorpus(std::move(name), std::move(pairs), vocab.size());
}

std::size_t ParallelCorpus::target_token_count() const {
  std::size_t n = 0;
  for (const auto& p : pairs_) n += p.target.size();
  return n;
}

std::vector<RawPair> read_tsv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open corpus " + path.string());
  std::vector<RawPair> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": missing TAB separator");
    }
    out.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  return out;
}

void write_tsv(const std::filesystem::path& path, std::span<const RawPair> pairs) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& [s, t] : pairs) out << s << '\t' << t << '\n';
}

}  // namespace knnmt
