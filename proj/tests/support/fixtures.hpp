#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "knnmt/datastore.hpp"
#include "knnmt/model.hpp"
#include "knnmt/toy.hpp"

namespace knnmt::testing {

// The bundled toy scenario with the default base model. The trained model
// is cached under KNNMT_FIXTURE_DIR so separate test processes share it.
struct ToyFixture {
  ToyCorpus raw;
  Vocab vocab;
  ParallelCorpus train;
  ParallelCorpus datastore_corpus;
  ParallelCorpus heldout;
  ParallelCorpus test;
  std::shared_ptr<const BaseModel> model;
  std::shared_ptr<const Datastore> store;
};

const ToyFixture& toy_fixture();

// Vocab of `n` synthetic tokens "w0".."w{n-1}" plus the specials.
Vocab synthetic_vocab(std::size_t n);

// Random corpus over `vocab` with lengths in [1, max_len].
ParallelCorpus random_corpus(const Vocab& vocab, std::size_t pairs, std::size_t max_len,
                             std::uint64_t seed, std::string name = "random");

// Store with standard-normal keys and uniform non-special values.
Datastore random_store(std::size_t n, std::size_t dim, std::size_t vocab_size, std::uint64_t seed);

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace knnmt::testing
