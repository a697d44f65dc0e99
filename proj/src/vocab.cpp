#include "knnmt/vocab.hpp"

#include <algorithm>
#include <map>
#include <sstream>

namespace knnmt {
namespace {

const std::vector<std::string>& special_surfaces() {
  static const std::vector<std::string> s{"<pad>", "<bos>", "<eos>", "<unk>"};
  return s;
}

}  // namespace

Vocab::Vocab() : Vocab(std::vector<std::string>{}) {}

Vocab::Vocab(std::vector<std::string> tokens) {
  surface_ = special_surfaces();
  surface_.insert(surface_.end(), std::make_move_iterator(tokens.begin()),
                  std::make_move_iterator(tokens.end()));
  for (TokenId i = 0; i < surface_.size(); ++i) {
    if (surface_[i].empty()) throw InvalidArgument("empty token in vocabulary");
    if (!index_.emplace(surface_[i], i).second) {
      throw InvalidArgument("duplicate token in vocabulary: " + surface_[i]);
    }
  }
}

TokenId Vocab::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? kUnk : it->second;
}

bool Vocab::contains(std::string_view token) const {
  return index_.contains(std::string(token));
}

const std::string& Vocab::surface(TokenId id) const {
  if (id >= surface_.size()) {
    throw InvalidArgument("token id " + std::to_string(id) + " out of range for vocab of size " +
                          std::to_string(surface_.size()));
  }
  return surface_[id];
}

std::vector<TokenId> Vocab::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& tok : split_tokens(text)) ids.push_back(id(tok));
  return ids;
}

std::string Vocab::decode(std::span<const TokenId> ids, bool strip_specials) const {
  std::string out;
  for (TokenId t : ids) {
    if (strip_specials && (t == kPad || t == kBos || t == kEos)) continue;
    if (!out.empty()) out += ' ';
    out += surface(t);
  }
  return out;
}

void Vocab::serialize(ByteWriter& w) const {
  w.u32(static_cast<std::uint32_t>(surface_.size()));
  for (const auto& s : surface_) w.str(s);
}

Vocab Vocab::deserialize(ByteReader& r) {
  auto n = r.u32();
  if (n < kNumSpecial) throw FormatError("vocabulary shorter than the special tokens");
  std::vector<std::string> all;
  all.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) all.push_back(r.str());
  if (!std::equal(special_surfaces().begin(), special_surfaces().end(), all.begin())) {
    throw FormatError("vocabulary special tokens out of place");
  }
  return Vocab(std::vector<std::string>(all.begin() + kNumSpecial, all.end()));
}

std::uint64_t Vocab::fingerprint() const {
  ByteWriter w;
  serialize(w);
  return fnv1a(w.data());
}

std::vector<std::string> split_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::istringstream in{std::string(text)};
  std::string tok;
  while (in >> tok) out.push_back(tok);
  return out;
}

Vocab build_vocab(std::span<const RawPair> corpus, std::size_t max_size) {
  if (corpus.empty()) throw InvalidArgument("build_vocab: empty corpus");
  if (max_size < Vocab::kNumSpecial) {
    throw InvalidArgument("build_vocab: max_size must leave room for the 4 special tokens");
  }
  std::map<std::string, std::size_t> counts;
  for (const auto& [src, tgt] : corpus) {
    for (auto& t : split_tokens(src)) ++counts[t];
    for (auto& t : split_tokens(tgt)) ++counts[t];
  }
  for (const auto& s : special_surfaces()) counts.erase(s);

  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::size_t keep = std::min(ranked.size(), max_size - Vocab::kNumSpecial);
  std::vector<std::string> tokens;
  tokens.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) tokens.push_back(std::move(ranked[i].first));
  return Vocab(std::move(tokens));
}

}  // namespace knnmt
