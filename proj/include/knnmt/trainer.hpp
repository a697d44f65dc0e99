#pragma once

#include <vector>

#include "knnmt/model.hpp"

namespace knnmt {

struct TrainOptions {
  int epochs = 20;
  double lr = 0.2;
  std::uint64_t seed = 1;
};

struct TrainReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> epoch_loss;  // mean per-sentence loss seen during each epoch
};

// Mean teacher-forced cross-entropy in nats per target token.
double corpus_loss(const BaseModel& model, const ParallelCorpus& corpus);

// Mean cross-entropy over every target token of `pairs`; the gradient is
// written to `grad` (resized and zeroed first).
double loss_and_gradient(const BaseModel& model, std::span<const SentencePair> pairs,
                         ModelWeights& grad);

// Plain SGD, one sentence per update, shuffled each epoch with `seed`.
// Weights are rounded to float32 at the end so the in-memory model equals
// its checkpoint. Throws Error on a non-finite loss.
TrainReport train(BaseModel& model, const ParallelCorpus& corpus, const TrainOptions& opts);

}  // namespace knnmt
