#pragma once

#include <cstdint>
#include <vector>

#include "knnmt/vocab.hpp"

namespace knnmt {

// Templated parallel sentences in two domains that share function words but
// have disjoint content vocabularies. The base model trains on the general
// domain; the datastore, held-out and test splits come from the medical one.
struct ToyCorpusOptions {
  std::size_t train_pairs = 2000;
  std::size_t datastore_pairs = 500;
  std::size_t heldout_pairs = 200;
  std::size_t test_pairs = 200;
  // Medical splits draw with replacement from this many distinct sentences
  // (0 = no pool, every pair sampled independently).
  std::size_t medical_pool = 150;
  std::uint64_t seed = 7;
};

struct ToyCorpus {
  std::vector<RawPair> train;      // general domain
  std::vector<RawPair> datastore;  // medical domain
  std::vector<RawPair> heldout;    // medical domain
  std::vector<RawPair> test;       // medical domain

  // Every split, for building the shared vocabulary.
  std::vector<RawPair> all() const;
};

ToyCorpus make_toy_corpus(const ToyCorpusOptions& opts = {});

enum class ToyDomain { kGeneral, kMedical };
std::vector<RawPair> make_toy_pairs(ToyDomain domain, std::size_t n, std::uint64_t seed);

}  // namespace knnmt
