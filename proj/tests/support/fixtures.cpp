#include "fixtures.hpp"

#include <atomic>
#include <mutex>
#include <unistd.h>

#include "knnmt/rng.hpp"
#include "knnmt/trainer.hpp"

namespace knnmt::testing {

namespace fs = std::filesystem;

const ToyFixture& toy_fixture() {
  static std::once_flag once;
  static ToyFixture f;
  std::call_once(once, [] {
    f.raw = make_toy_corpus();
    f.vocab = build_vocab(f.raw.all(), 10000);
    f.train = ParallelCorpus::encode("train", f.raw.train, f.vocab);
    f.datastore_corpus = ParallelCorpus::encode("datastore", f.raw.datastore, f.vocab);
    f.heldout = ParallelCorpus::encode("heldout", f.raw.heldout, f.vocab);
    f.test = ParallelCorpus::encode("test", f.raw.test, f.vocab);

    const fs::path cache = fs::path(KNNMT_FIXTURE_DIR) / "toy_model.bin";
    std::optional<BaseModel> model;
    if (fs::exists(cache)) {
      try {
        auto cached = BaseModel::load(cache);
        if (cached.vocab() == f.vocab) model.emplace(std::move(cached));
      } catch (const Error&) {
      }
    }
    if (!model) {
      model.emplace(BaseModel::initialize(f.vocab, 64, 3, 1));
      train(*model, f.train, TrainOptions{});
      fs::create_directories(cache.parent_path());
      auto tmp = cache;
      tmp += "." + std::to_string(::getpid());
      model->save(tmp);
      fs::rename(tmp, cache);
    }
    f.model = std::make_shared<const BaseModel>(std::move(*model));
    f.store = std::make_shared<const Datastore>(build_datastore(*f.model, f.datastore_corpus));
  });
  return f;
}

Vocab synthetic_vocab(std::size_t n) {
  std::vector<std::string> tokens;
  for (std::size_t i = 0; i < n; ++i) tokens.push_back("w" + std::to_string(i));
  return Vocab(std::move(tokens));
}

ParallelCorpus random_corpus(const Vocab& vocab, std::size_t pairs, std::size_t max_len,
                             std::uint64_t seed, std::string name) {
  Rng rng(seed);
  const std::size_t regular = vocab.size() - Vocab::kNumSpecial;
  auto sentence = [&] {
    std::vector<TokenId> s(1 + rng.below(max_len));
    for (auto& t : s) t = static_cast<TokenId>(Vocab::kNumSpecial + rng.below(regular));
    return s;
  };
  std::vector<SentencePair> out;
  for (std::size_t i = 0; i < pairs; ++i) out.push_back({sentence(), sentence()});
  return ParallelCorpus(std::move(name), std::move(out), vocab.size());
}

Datastore random_store(std::size_t n, std::size_t dim, std::size_t vocab_size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> keys(n * dim);
  for (auto& k : keys) k = static_cast<float>(rng.normal());
  std::vector<TokenId> values(n);
  std::vector<Provenance> prov(n);
  for (std::size_t i = 0; i < n; ++i) {
    values[i] = static_cast<TokenId>(Vocab::kNumSpecial + rng.below(vocab_size - Vocab::kNumSpecial));
    prov[i] = {static_cast<std::uint32_t>(i / 10), static_cast<std::uint32_t>(i % 10)};
  }
  return Datastore(dim, std::move(keys), std::move(values), std::move(prov),
                   DatastoreMeta{1, 2, "random", {}});
}

TempDir::TempDir() {
  static std::atomic<int> counter{0};
  path_ = fs::temp_directory_path() /
          ("knnmt_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
  fs::remove_all(path_);
  fs::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

}  // namespace knnmt::testing
