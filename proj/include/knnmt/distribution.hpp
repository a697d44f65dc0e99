#pragma once

#include <span>
#include <utility>
#include <vector>

#include "knnmt/common.hpp"

namespace knnmt {

// Probability vector over the vocabulary.
class Distribution {
 public:
  static constexpr double kTolerance = 1e-6;

  Distribution() = default;
  // Throws InvalidArgument unless entries are >= 0 and sum to 1 within kTolerance.
  explicit Distribution(std::vector<double> probs);

  static Distribution uniform(std::size_t size);
  static Distribution one_hot(std::size_t size, TokenId token);
  // max-subtracted softmax.
  static Distribution softmax(std::span<const double> logits);

  std::size_t size() const { return probs_.size(); }
  double operator[](TokenId t) const { return probs_[t]; }
  std::span<const double> probs() const { return probs_; }

  // Lowest id wins ties.
  TokenId argmax() const;
  // The `n` most probable tokens, descending; ties by lower id.
  std::vector<std::pair<TokenId, double>> top(std::size_t n) const;

 private:
  std::vector<double> probs_;
};

}  // namespace knnmt
