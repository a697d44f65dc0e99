#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "knnmt/common.hpp"

namespace knnmt {

// Dense token-id table. Ids 0..3 are reserved for the special tokens.
class Vocab {
 public:
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kBos = 1;
  static constexpr TokenId kEos = 2;
  static constexpr TokenId kUnk = 3;
  static constexpr std::size_t kNumSpecial = 4;

  // Specials only.
  Vocab();
  // `tokens` excludes the specials; must be unique and not collide with them.
  explicit Vocab(std::vector<std::string> tokens);

  std::size_t size() const { return surface_.size(); }
  TokenId id(std::string_view token) const;  // unk when absent
  bool contains(std::string_view token) const;
  const std::string& surface(TokenId id) const;

  std::vector<TokenId> encode(std::string_view text) const;
  std::string decode(std::span<const TokenId> ids, bool strip_specials = true) const;

  const std::vector<std::string>& surfaces() const { return surface_; }

  void serialize(ByteWriter& w) const;
  static Vocab deserialize(ByteReader& r);
  std::uint64_t fingerprint() const;

  bool operator==(const Vocab& other) const { return surface_ == other.surface_; }

 private:
  std::vector<std::string> surface_;
  std::unordered_map<std::string, TokenId> index_;
};

// Whitespace tokenization.
std::vector<std::string> split_tokens(std::string_view text);

using RawPair = std::pair<std::string, std::string>;

// Specials take ids 0-3, then tokens by descending frequency with ties
// broken lexicographically. `max_size` counts the specials.
Vocab build_vocab(std::span<const RawPair> corpus, std::size_t max_size);

}  // namespace knnmt
