#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "fixtures.hpp"
#include "knnmt/datastore.hpp"
#include "knnmt/rng.hpp"

using namespace knnmt;
using knnmt::testing::random_corpus;
using knnmt::testing::random_store;
using knnmt::testing::synthetic_vocab;
using knnmt::testing::TempDir;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Datastore, OneEntryPerTargetToken) {
  auto vocab = synthetic_vocab(12);
  auto corpus = random_corpus(vocab, 30, 6, 4);
  auto model = BaseModel::initialize(vocab, 8, 3, 2);
  auto ds = build_datastore(model, corpus);
  ASSERT_EQ(ds.size(), corpus.target_token_count());
  EXPECT_EQ(ds.dim(), 8u);

  std::size_t i = 0;
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    const auto& pair = corpus[s];
    for (std::size_t t = 0; t < pair.target.size(); ++t, ++i) {
      EXPECT_EQ(ds.value(i), pair.target[t]);
      EXPECT_EQ(ds.provenance()[i], (Provenance{static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(t)}));
      auto h = model.forward_step(pair.source, std::span(pair.target).first(t)).hidden;
      auto key = ds.key(i);
      for (std::size_t c = 0; c < h.size(); ++c) ASSERT_EQ(key[c], static_cast<float>(h[c]));
    }
  }
  EXPECT_EQ(ds.meta().model_fp, model.fingerprint());
  EXPECT_EQ(ds.meta().vocab_fp, vocab.fingerprint());
  EXPECT_EQ(ds.meta().corpus, "random");
  EXPECT_DOUBLE_EQ(ds.scale(), 1.0);
}

TEST(Datastore, RejectsEmptyCorpus) {
  auto vocab = synthetic_vocab(4);
  auto model = BaseModel::initialize(vocab, 4, 2, 1);
  EXPECT_THROW(build_datastore(model, ParallelCorpus("e", {}, vocab.size())), InvalidArgument);
}

TEST(Datastore, SaveLoadIsBitExact) {
  TempDir dir;
  auto ds = random_store(300, 7, 40, 5);
  ds.save(dir / "ds");
  auto back = Datastore::load(dir / "ds");
  ASSERT_EQ(back.size(), ds.size());
  ASSERT_EQ(back.dim(), ds.dim());
  EXPECT_EQ(std::memcmp(back.keys().data(), ds.keys().data(), ds.keys().size_bytes()), 0);
  EXPECT_TRUE(std::equal(back.values().begin(), back.values().end(), ds.values().begin()));
  EXPECT_TRUE(std::equal(back.provenance().begin(), back.provenance().end(), ds.provenance().begin()));
  EXPECT_EQ(back.meta(), ds.meta());
  EXPECT_EQ(back.fingerprint(), ds.fingerprint());
  EXPECT_EQ(fs::file_size(dir / "ds" / "keys.bin"), 300u * 7 * 4);
}

TEST(Datastore, RandomReadsMatchAfterReload) {
  TempDir dir;
  auto ds = random_store(2000, 16, 50, 8);
  ds.save(dir / "ds");
  auto back = Datastore::load(dir / "ds");
  Rng rng(1);
  for (int i = 0; i < 10000; ++i) {
    std::size_t idx = rng.below(ds.size());
    auto a = ds.key(idx);
    auto b = back.key(idx);
    ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << idx;
    ASSERT_EQ(ds.value(idx), back.value(idx));
  }
}

TEST(Datastore, DetectsTruncatedAndMismatchedFiles) {
  TempDir dir;
  auto ds = random_store(50, 4, 20, 2);
  ds.save(dir / "ds");

  fs::copy(dir / "ds", dir / "keys_short");
  fs::resize_file(dir / "keys_short" / "keys.bin", 50 * 4 * 4 - 4);
  EXPECT_THROW(Datastore::load(dir / "keys_short"), FormatError);

  fs::copy(dir / "ds", dir / "values_long");
  std::ofstream(dir / "values_long" / "values.bin", std::ios::app | std::ios::binary) << "xxxx";
  EXPECT_THROW(Datastore::load(dir / "values_long"), FormatError);

  fs::copy(dir / "ds", dir / "bad_meta");
  std::ofstream(dir / "bad_meta" / "meta.json", std::ios::trunc) << "{\"n\": 50}";
  EXPECT_THROW(Datastore::load(dir / "bad_meta"), FormatError);

  EXPECT_THROW(Datastore::load(dir / "missing"), Error);
}

TEST(Datastore, StaleModelIsRejected) {
  auto vocab = synthetic_vocab(10);
  auto corpus = random_corpus(vocab, 5, 4, 1);
  auto model = BaseModel::initialize(vocab, 6, 2, 1);
  auto other = BaseModel::initialize(vocab, 6, 2, 2);
  auto ds = build_datastore(model, corpus);
  EXPECT_NO_THROW(ds.check_compatible(model));
  EXPECT_THROW(ds.check_compatible(other), StaleArtifact);
  auto other_vocab = BaseModel::initialize(synthetic_vocab(11), 6, 2, 1);
  EXPECT_THROW(ds.check_compatible(other_vocab), StaleArtifact);
}

TEST(Datastore, BuildIsDeterministicOnDisk) {
  TempDir dir;
  auto vocab = synthetic_vocab(10);
  auto corpus = random_corpus(vocab, 20, 5, 3);
  auto model = BaseModel::initialize(vocab, 6, 2, 1);
  build_datastore(model, corpus).save(dir / "a");
  build_datastore(model, corpus).save(dir / "b");
  for (const char* f : {"keys.bin", "values.bin", "prov.bin", "meta.json"}) {
    EXPECT_EQ(slurp(dir / "a" / f), slurp(dir / "b" / f)) << f;
  }
}

TEST(Datastore, SubsetAndRelabelRecordTransforms) {
  auto ds = random_store(10, 3, 20, 4);
  std::vector<std::size_t> keep{7, 2, 5};
  auto sub = ds.subset(keep, {"prune_margin", {{"scale", 0.3}}});
  ASSERT_EQ(sub.size(), 3u);
  for (std::size_t i = 0; i < keep.size(); ++i) {
    EXPECT_EQ(sub.value(i), ds.value(keep[i]));
    EXPECT_EQ(sub.provenance()[i], ds.provenance()[keep[i]]);
    auto a = sub.key(i);
    auto b = ds.key(keep[i]);
    EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin()));
  }
  ASSERT_EQ(sub.meta().transforms.size(), 1u);
  EXPECT_TRUE(sub.has_transform("prune_margin"));
  EXPECT_NE(sub.fingerprint(), ds.fingerprint());

  std::vector<TokenId> values(ds.size(), 9);
  auto re = ds.relabel(values, {"relabel", {}});
  EXPECT_EQ(re.value(4), 9u);
  EXPECT_EQ(re.keys().data(), ds.keys().data());
  EXPECT_THROW(ds.relabel(std::vector<TokenId>(3, 9), {"relabel", {}}), Error);
}

TEST(Datastore, ConstructorValidatesShapes) {
  EXPECT_THROW(Datastore(2, std::vector<float>(5), std::vector<TokenId>(2), std::vector<Provenance>(2), {}),
               Error);
  EXPECT_THROW(Datastore(2, std::vector<float>{1, NAN}, std::vector<TokenId>(1), std::vector<Provenance>(1), {}),
               Error);
}
