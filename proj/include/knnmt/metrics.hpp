#pragma once

#include <span>
#include <vector>

#include "knnmt/common.hpp"

namespace knnmt {

// Corpus BLEU over token-id sequences, up to 4-grams, with brevity penalty.
// An n-gram order with zero matches contributes epsilon / total instead of 0
// ("floor" smoothing); an order with no candidate n-grams at all scores 0.
struct BleuOptions {
  int max_order = 4;
  double epsilon = 0.1;
};

struct BleuScore {
  double score = 0.0;  // [0, 100]
  double brevity_penalty = 0.0;
  std::vector<double> precisions;
  std::size_t hypothesis_length = 0;
  std::size_t reference_length = 0;
};

BleuScore corpus_bleu(std::span<const std::vector<TokenId>> hypotheses,
                      std::span<const std::vector<TokenId>> references, const BleuOptions& opts = {});

}  // namespace knnmt
