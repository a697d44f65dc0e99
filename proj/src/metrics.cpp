#include "knnmt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace knnmt {
namespace {

using NGram = std::vector<TokenId>;

std::map<NGram, std::size_t> ngram_counts(const std::vector<TokenId>& seq, int order) {
  std::map<NGram, std::size_t> counts;
  const auto n = static_cast<std::size_t>(order);
  for (std::size_t i = 0; i + n <= seq.size(); ++i) {
    ++counts[NGram(seq.begin() + static_cast<std::ptrdiff_t>(i),
                   seq.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return counts;
}

}  // namespace

BleuScore corpus_bleu(std::span<const std::vector<TokenId>> hypotheses,
                      std::span<const std::vector<TokenId>> references, const BleuOptions& opts) {
  if (hypotheses.size() != references.size()) {
    throw InvalidArgument("corpus_bleu: hypothesis and reference counts differ");
  }
  if (hypotheses.empty()) throw InvalidArgument("corpus_bleu: empty corpus");
  if (opts.max_order < 1) throw InvalidArgument("corpus_bleu: max_order must be >= 1");

  std::vector<std::size_t> matches(static_cast<std::size_t>(opts.max_order), 0);
  std::vector<std::size_t> totals(static_cast<std::size_t>(opts.max_order), 0);
  BleuScore out;
  for (std::size_t s = 0; s < hypotheses.size(); ++s) {
    out.hypothesis_length += hypotheses[s].size();
    out.reference_length += references[s].size();
    for (int n = 1; n <= opts.max_order; ++n) {
      auto hyp = ngram_counts(hypotheses[s], n);
      auto ref = ngram_counts(references[s], n);
      for (const auto& [gram, count] : hyp) {
        auto it = ref.find(gram);
        std::size_t clip = it == ref.end() ? 0 : it->second;
        matches[static_cast<std::size_t>(n - 1)] += std::min(count, clip);
        totals[static_cast<std::size_t>(n - 1)] += count;
      }
    }
  }

  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 0; n < totals.size(); ++n) {
    double p = 0.0;
    if (totals[n] == 0) {
      zero = true;
    } else if (matches[n] == 0) {
      p = opts.epsilon / static_cast<double>(totals[n]);
    } else {
      p = static_cast<double>(matches[n]) / static_cast<double>(totals[n]);
    }
    out.precisions.push_back(p);
    if (p > 0.0) log_sum += std::log(p);
  }
  const double c = static_cast<double>(out.hypothesis_length);
  const double r = static_cast<double>(out.reference_length);
  out.brevity_penalty = c == 0.0 ? 0.0 : (c > r ? 1.0 : std::exp(1.0 - r / c));
  if (zero || c == 0.0) {
    out.score = 0.0;
  } else {
    out.score = 100.0 * out.brevity_penalty * std::exp(log_sum / static_cast<double>(opts.max_order));
  }
  return out;
}

}  // namespace knnmt
