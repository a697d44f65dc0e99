#include "knnmt/distribution.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace knnmt {

Distribution::Distribution(std::vector<double> probs) : probs_(std::move(probs)) {
  if (probs_.empty()) throw InvalidArgument("distribution over an empty vocabulary");
  double sum = 0.0;
  for (double p : probs_) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw InvalidArgument("distribution has a negative or non-finite entry");
    sum += p;
  }
  if (std::abs(sum - 1.0) > kTolerance) {
    throw InvalidArgument("distribution sums to " + std::to_string(sum));
  }
}

Distribution Distribution::uniform(std::size_t size) {
  return Distribution(std::vector<double>(size, 1.0 / static_cast<double>(size)));
}

Distribution Distribution::one_hot(std::size_t size, TokenId token) {
  std::vector<double> p(size, 0.0);
  p.at(token) = 1.0;
  return Distribution(std::move(p));
}

Distribution Distribution::softmax(std::span<const double> logits) {
  double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return Distribution(std::move(p));
}

TokenId Distribution::argmax() const {
  return static_cast<TokenId>(std::max_element(probs_.begin(), probs_.end()) - probs_.begin());
}

std::vector<std::pair<TokenId, double>> Distribution::top(std::size_t n) const {
  std::vector<TokenId> ids(probs_.size());
  std::iota(ids.begin(), ids.end(), TokenId{0});
  n = std::min(n, ids.size());
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n), ids.end(),
                    [&](TokenId a, TokenId b) {
                      return probs_[a] != probs_[b] ? probs_[a] > probs_[b] : a < b;
                    });
  std::vector<std::pair<TokenId, double>> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.emplace_back(ids[i], probs_[ids[i]]);
  return out;
}

}  // namespace knnmt
