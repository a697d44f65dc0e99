#include "knnmt/trainer.hpp"

#include <cmath>
#include <numeric>

#include "knnmt/rng.hpp"

namespace knnmt {
namespace {

void resize_like(const ModelWeights& src, ModelWeights& dst) {
  auto s = src.tensors();
  auto d = dst.tensors();
  for (std::size_t i = 0; i < s.size(); ++i) d[i]->assign(s[i]->size(), 0.0);
}

}  // namespace

double corpus_loss(const BaseModel& model, const ParallelCorpus& corpus) {
  if (corpus.empty()) throw InvalidArgument("corpus_loss: empty corpus");
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& pair : corpus.pairs()) {
    auto ctx = model.source_context(pair.source);
    for (std::size_t t = 0; t < pair.target.size(); ++t) {
      auto h = model.hidden_state(ctx, std::span(pair.target).first(t));
      auto p = model.output_distribution(h);
      total -= std::log(p[pair.target[t]]);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

double loss_and_gradient(const BaseModel& model, std::span<const SentencePair> pairs,
                         ModelWeights& grad) {
  const ModelWeights& w = model.weights();
  resize_like(w, grad);
  const std::size_t d = model.dim();
  const std::size_t m = model.window();
  const std::size_t in = model.input_dim();
  const std::size_t V = model.vocab_size();

  std::size_t total_tokens = 0;
  for (const auto& p : pairs) total_tokens += p.target.size();
  if (total_tokens == 0) throw InvalidArgument("loss_and_gradient: no target tokens");
  const double scale = 1.0 / static_cast<double>(total_tokens);

  std::vector<double> mean(d), ctx(d), z(in), h(d), logits(V), dh(d), da(d), dz(in), dctx(d);
  double loss = 0.0;

  for (const auto& pair : pairs) {
    model.check_ids(pair.source);
    model.check_ids(pair.target);
    std::fill(mean.begin(), mean.end(), 0.0);
    for (TokenId t : pair.source) {
      for (std::size_t i = 0; i < d; ++i) mean[i] += w.embedding[t * d + i];
    }
    const double inv_src = 1.0 / static_cast<double>(pair.source.size());
    for (double& v : mean) v *= inv_src;
    for (std::size_t r = 0; r < d; ++r) {
      double acc = w.src_bias[r];
      for (std::size_t c = 0; c < d; ++c) acc += w.src_proj[r * d + c] * mean[c];
      ctx[r] = acc;
    }
    std::fill(dctx.begin(), dctx.end(), 0.0);

    for (std::size_t t = 0; t < pair.target.size(); ++t) {
      const TokenId gold = pair.target[t];
      auto win = model.window_tokens(std::span(pair.target).first(t));
      model.assemble_input(ctx, win, z);
      for (std::size_t r = 0; r < d; ++r) {
        const double* row = &w.hidden[r * in];
        double acc = w.hidden_bias[r];
        for (std::size_t c = 0; c < in; ++c) acc += row[c] * z[c];
        h[r] = std::tanh(acc);
      }
      double mx = -INFINITY;
      for (std::size_t v = 0; v < V; ++v) {
        const double* row = &w.output[v * d];
        double acc = w.output_bias[v];
        for (std::size_t c = 0; c < d; ++c) acc += row[c] * h[c];
        logits[v] = acc;
        mx = std::max(mx, acc);
      }
      double zsum = 0.0;
      for (std::size_t v = 0; v < V; ++v) {
        logits[v] = std::exp(logits[v] - mx);
        zsum += logits[v];
      }
      // logits now holds probabilities
      for (double& v : logits) v /= zsum;
      loss -= std::log(logits[gold]);

      std::fill(dh.begin(), dh.end(), 0.0);
      for (std::size_t v = 0; v < V; ++v) {
        double g = (logits[v] - (v == gold ? 1.0 : 0.0)) * scale;
        grad.output_bias[v] += g;
        double* grow = &grad.output[v * d];
        const double* wrow = &w.output[v * d];
        for (std::size_t c = 0; c < d; ++c) {
          grow[c] += g * h[c];
          dh[c] += g * wrow[c];
        }
      }
      for (std::size_t r = 0; r < d; ++r) da[r] = dh[r] * (1.0 - h[r] * h[r]);
      std::fill(dz.begin(), dz.end(), 0.0);
      for (std::size_t r = 0; r < d; ++r) {
        grad.hidden_bias[r] += da[r];
        double* grow = &grad.hidden[r * in];
        const double* wrow = &w.hidden[r * in];
        const double a = da[r];
        for (std::size_t c = 0; c < in; ++c) {
          grow[c] += a * z[c];
          dz[c] += a * wrow[c];
        }
      }
      for (std::size_t i = 0; i < d; ++i) dctx[i] += dz[i];
      for (std::size_t j = 0; j < m; ++j) {
        double* erow = &grad.embedding[win[j] * d];
        for (std::size_t i = 0; i < d; ++i) erow[i] += dz[(1 + j) * d + i];
      }
    }

    std::vector<double> dmean(d, 0.0);
    for (std::size_t r = 0; r < d; ++r) {
      grad.src_bias[r] += dctx[r];
      for (std::size_t c = 0; c < d; ++c) {
        grad.src_proj[r * d + c] += dctx[r] * mean[c];
        dmean[c] += dctx[r] * w.src_proj[r * d + c];
      }
    }
    for (TokenId t : pair.source) {
      for (std::size_t i = 0; i < d; ++i) grad.embedding[t * d + i] += dmean[i] * inv_src;
    }
  }
  return loss * scale;
}

TrainReport train(BaseModel& model, const ParallelCorpus& corpus, const TrainOptions& opts) {
  if (corpus.empty()) throw InvalidArgument("train: empty corpus");
  if (opts.epochs < 0) throw InvalidArgument("train: negative epoch count");
  if (!(opts.lr >= 0.0)) throw InvalidArgument("train: learning rate must be >= 0");

  TrainReport report;
  report.initial_loss = corpus_loss(model, corpus);
  if (!std::isfinite(report.initial_loss)) throw Error("train: non-finite initial loss");

  Rng rng(opts.seed);
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  ModelWeights grad;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    rng.shuffle(order);
    double running = 0.0;
    for (std::size_t idx : order) {
      double loss = loss_and_gradient(model, std::span(&corpus[idx], 1), grad);
      if (!std::isfinite(loss)) {
        throw Error("train: non-finite loss at epoch " + std::to_string(epoch) + ", pair " +
                    std::to_string(idx));
      }
      running += loss;
      auto wt = model.weights().tensors();
      auto gt = grad.tensors();
      for (std::size_t i = 0; i < wt.size(); ++i) {
        auto& wv = *wt[i];
        const auto& gv = *gt[i];
        for (std::size_t j = 0; j < wv.size(); ++j) wv[j] -= opts.lr * gv[j];
      }
    }
    report.epoch_loss.push_back(running / static_cast<double>(order.size()));
  }
  model.round_to_float();
  if (!model.weights().all_finite()) throw Error("train: weights diverged to non-finite values");
  report.final_loss = corpus_loss(model, corpus);
  return report;
}

}  // namespace knnmt
