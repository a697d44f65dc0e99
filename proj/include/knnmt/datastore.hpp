#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "knnmt/corpus.hpp"
#include "knnmt/model.hpp"

namespace knnmt {

struct Provenance {
  std::uint32_t sentence = 0;
  std::uint32_t position = 0;

  bool operator==(const Provenance&) const = default;
};

// One step of a datastore's transform chain, e.g. {"kind": "pca", "params": {...}}.
struct TransformRecord {
  std::string kind;
  nlohmann::json params = nlohmann::json::object();

  bool operator==(const TransformRecord&) const = default;
};

struct DatastoreMeta {
  std::uint64_t vocab_fp = 0;
  std::uint64_t model_fp = 0;
  std::string corpus;
  std::vector<TransformRecord> transforms;

  bool operator==(const DatastoreMeta&) const = default;
};

// Read-only view of a file mapped into memory.
class MappedFile {
 public:
  explicit MappedFile(const std::filesystem::path& path);
  ~MappedFile();
  MappedFile(const MappedFile&) = delete;
  MappedFile& operator=(const MappedFile&) = delete;

  std::span<const std::byte> bytes() const { return {static_cast<const std::byte*>(addr_), size_}; }

 private:
  void* addr_ = nullptr;
  std::size_t size_ = 0;
};

// Immutable key/value memory. Copies share the underlying key storage.
//
// On disk a datastore is a directory holding
//   keys.bin   N x dim little-endian float32, row-major
//   values.bin N little-endian u32
//   prov.bin   N (sentence, position) u32 pairs
//   meta.json  {"n", "dim", "vocab_fp", "model_fp", "corpus", "transforms"}
class Datastore {
 public:
  Datastore(std::size_t dim, std::vector<float> keys, std::vector<TokenId> values,
            std::vector<Provenance> provenance, DatastoreMeta meta);

  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }
  std::size_t dim() const { return dim_; }

  std::span<const float> keys() const { return keys_; }
  std::span<const float> key(std::size_t i) const { return keys_.subspan(i * dim_, dim_); }
  std::span<const TokenId> values() const { return values_; }
  TokenId value(std::size_t i) const { return values_[i]; }
  std::span<const Provenance> provenance() const { return provenance_; }
  const DatastoreMeta& meta() const { return meta_; }

  // FNV-1a over keys then values; identifies the store for derived indexes.
  std::uint64_t fingerprint() const { return fingerprint_; }
  // Fraction of the full store retained, the product of prune scales in the chain.
  double scale() const;
  bool has_transform(std::string_view kind) const;

  // Throws StaleArtifact unless the store was built by `model` (and its vocab).
  void check_compatible(const BaseModel& model) const;

  // New store holding the listed entries in the given order, with `record` appended.
  Datastore subset(std::span<const std::size_t> keep, TransformRecord record) const;
  // New store with every value replaced, with `record` appended.
  Datastore relabel(std::vector<TokenId> values, TransformRecord record) const;

  void save(const std::filesystem::path& dir) const;
  // Keys stay file-backed (memory mapped).
  static Datastore load(const std::filesystem::path& dir);

  nlohmann::json meta_json() const;

 private:
  Datastore(std::size_t dim, std::shared_ptr<const void> owner, std::span<const float> keys,
            std::vector<TokenId> values, std::vector<Provenance> provenance, DatastoreMeta meta);
  void validate() const;

  std::size_t dim_;
  std::shared_ptr<const void> key_owner_;
  std::span<const float> keys_;
  std::vector<TokenId> values_;
  std::vector<Provenance> provenance_;
  DatastoreMeta meta_;
  std::uint64_t fingerprint_ = 0;
};

// Teacher-forced pass: one entry per target token (eos included), ordered
// by (sentence, position). Key is the model's hidden state for (X, Y<t).
Datastore build_datastore(const BaseModel& model, const ParallelCorpus& corpus);

}  // namespace knnmt
