#include "knnmt/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <atomic>
#include <mutex>
#include <thread>

namespace knnmt {

EvalMode parse_eval_mode(std::string_view s) {
  if (s == "teacher_forced") return EvalMode::kTeacherForced;
  if (s == "free_running") return EvalMode::kFreeRunning;
  throw InvalidArgument("unknown evaluation mode '" + std::string(s) + "'");
}

std::string_view to_string(EvalMode m) {
  return m == EvalMode::kTeacherForced ? "teacher_forced" : "free_running";
}

DistributionSummary summarize(const Distribution& p, TokenId chosen, bool verbose, std::size_t top_n) {
  DistributionSummary s;
  double mass = 0.0;
  for (auto [tok, prob] : p.top(top_n)) {
    s.top.push_back({tok, prob});
    mass += prob;
  }
  s.chosen_prob = p[chosen];
  s.other_mass = std::max(0.0, 1.0 - mass);
  if (verbose) s.full.assign(p.probs().begin(), p.probs().end());
  return s;
}

nlohmann::json EvalReport::to_json() const {
  const bool forced = mode == EvalMode::kTeacherForced;
  nlohmann::json j{{"mode", to_string(mode)},
                   {"sentences", sentences},
                   {"tokens", tokens},
                   {"accuracy", forced ? nlohmann::json(accuracy) : nlohmann::json(nullptr)},
                   {"perplexity", forced ? nlohmann::json(perplexity) : nlohmann::json(nullptr)},
                   {"metadata", metadata}};
  if (bleu) {
    j["bleu"] = bleu->score;
    j["bleu_detail"] = {{"brevity_penalty", bleu->brevity_penalty},
                        {"precisions", bleu->precisions},
                        {"hypothesis_length", bleu->hypothesis_length},
                        {"reference_length", bleu->reference_length},
                        {"smoothing", "floor epsilon=0.1 on zero-match orders"}};
  }
  return j;
}

void TokenScorer::add(const Distribution& p, TokenId gold) {
  ++tokens_;
  if (p.argmax() == gold) ++correct_;
  nll_ -= std::log(std::max(p[gold], kProbabilityFloor));
}

void TokenScorer::merge(const TokenScorer& other) {
  tokens_ += other.tokens_;
  correct_ += other.correct_;
  nll_ += other.nll_;
}

double TokenScorer::accuracy() const {
  return tokens_ == 0 ? 0.0 : static_cast<double>(correct_) / static_cast<double>(tokens_);
}

double TokenScorer::perplexity() const {
  return tokens_ == 0 ? 0.0 : std::exp(nll_ / static_cast<double>(tokens_));
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(error_mu);
            if (!error) error = std::current_exception();
          }
        }
      });
    }
  }
  if (error) std::rethrow_exception(error);
}

Pipeline::Pipeline(std::shared_ptr<const BaseModel> model, std::shared_ptr<const Datastore> datastore,
                   CombinerConfig combiner, std::shared_ptr<const IvfIndex> ivf,
                   std::shared_ptr<const PcaTransform> pca, std::shared_ptr<const MetaNet> metanet,
                   std::optional<std::size_t> nprobe)
    : model_(std::move(model)), datastore_(std::move(datastore)), ivf_(std::move(ivf)),
      pca_(std::move(pca)), metanet_(std::move(metanet)), nprobe_(nprobe), combiner_(combiner) {
  if (!model_) throw InvalidArgument("pipeline needs a base model");
  combiner_.validate();
  if (datastore_ == nullptr) {
    if (ivf_ || pca_) throw InvalidArgument("IVF index or PCA given without a datastore");
    if (combiner_.variant == CombinerVariant::kAdaptive || combiner_.lambda > 0.0) {
      throw InvalidArgument("retrieval requested (lambda > 0 or adaptive) but no datastore configured");
    }
    return;
  }
  if (datastore_->empty()) throw InvalidArgument("datastore is empty");
  datastore_->check_compatible(*model_);
  retriever_.emplace(*datastore_, ivf_.get(), pca_.get(), nprobe_);
  const std::size_t query_dim = pca_ ? pca_->output_dim() : model_->dim();
  if (query_dim != datastore_->dim()) {
    throw StaleArtifact("query dimension " + std::to_string(query_dim) + " does not match datastore dimension " +
                        std::to_string(datastore_->dim()));
  }
  if (combiner_.variant == CombinerVariant::kAdaptive) {
    if (metanet_ == nullptr) throw InvalidArgument("adaptive combiner needs a meta network");
    if (metanet_->k() != combiner_.k) {
      throw InvalidArgument("meta network was trained for k=" + std::to_string(metanet_->k()) +
                            ", combiner asks for k=" + std::to_string(combiner_.k));
    }
    if (combiner_.k > datastore_->size()) throw InvalidArgument("k exceeds the datastore size");
  }
}

Pipeline Pipeline::load(const PipelineConfig& cfg) {
  auto model = std::make_shared<const BaseModel>(BaseModel::load(cfg.model));
  std::shared_ptr<const Datastore> ds;
  std::shared_ptr<const IvfIndex> ivf;
  std::shared_ptr<const PcaTransform> pca;
  std::shared_ptr<const MetaNet> net;
  if (cfg.datastore) ds = std::make_shared<const Datastore>(Datastore::load(*cfg.datastore));
  if (cfg.ivf) ivf = std::make_shared<const IvfIndex>(IvfIndex::load(*cfg.ivf));
  if (cfg.pca) pca = std::make_shared<const PcaTransform>(PcaTransform::load(*cfg.pca));
  if (cfg.metanet) net = std::make_shared<const MetaNet>(MetaNet::load(*cfg.metanet));
  return Pipeline(std::move(model), std::move(ds), cfg.combiner, std::move(ivf), std::move(pca),
                  std::move(net), cfg.nprobe);
}

Pipeline Pipeline::with_combiner(const CombinerConfig& combiner) const {
  return Pipeline(model_, datastore_, combiner, ivf_, pca_, metanet_, nprobe_);
}

StepResult Pipeline::step(std::span<const TokenId> source, std::span<const TokenId> prefix) const {
  auto ctx = model_->source_context(source);
  return step(ctx, prefix);
}

StepResult Pipeline::step(std::span<const double> source_context, std::span<const TokenId> prefix) const {
  auto hidden = model_->hidden_state(source_context, prefix);
  auto p_nmt = model_->output_distribution(hidden);
  if (!retriever_) {
    Distribution final_p = p_nmt;
    return {std::move(hidden), {}, {}, std::move(p_nmt), std::nullopt, std::move(final_p), {}};
  }
  auto query = retriever_->encode(hidden);
  auto neighbors = retriever_->search(query, combiner_.k);
  auto p_knn = knn_distribution(neighbors, combiner_.temperature, model_->vocab_size());
  std::vector<double> option_weights;
  std::optional<Distribution> p_final;
  if (combiner_.variant == CombinerVariant::kAdaptive) {
    auto w = metanet_->option_weights(neighbors);
    option_weights.assign(w.probs().begin(), w.probs().end());
    p_final = adaptive_combine(*metanet_, neighbors, p_nmt, combiner_.temperature);
  } else {
    p_final = interpolate(p_knn, p_nmt, combiner_.lambda);
  }
  return {std::move(hidden), std::move(query), std::move(neighbors), std::move(p_nmt),
          std::move(p_knn), std::move(*p_final), std::move(option_weights)};
}

namespace {

struct Hypothesis {
  std::vector<TokenId> tokens;  // eos included once finished
  double score = 0.0;
  std::vector<StepTrace> trace;
};

}  // namespace

Generation Pipeline::generate(std::span<const TokenId> source, std::size_t beam, std::size_t max_len,
                              bool verbose_trace) const {
  if (beam < 1) throw InvalidArgument("beam width must be >= 1");
  if (max_len < 1) throw InvalidArgument("max length must be >= 1");
  const auto ctx = model_->source_context(source);

  std::vector<Hypothesis> live(1);
  std::vector<Hypothesis> finished;
  struct Candidate {
    std::size_t parent;
    TokenId token;
    double score;
  };

  for (std::size_t t = 0; t < max_len && !live.empty(); ++t) {
    std::vector<Candidate> cands;
    std::vector<StepResult> results;
    results.reserve(live.size());
    for (std::size_t h = 0; h < live.size(); ++h) {
      results.push_back(step(ctx, live[h].tokens));
      for (auto [tok, prob] : results.back().p_final.top(2 * beam)) {
        cands.push_back({h, tok, live[h].score + std::log(std::max(prob, 1e-300))});
      }
    }
    std::stable_sort(cands.begin(), cands.end(),
                     [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
    // Twice the width is kept so the live beam stays full when some of the
    // best candidates end in eos. Those only count when ranked within `beam`.
    std::vector<Hypothesis> next;
    for (std::size_t i = 0; i < cands.size() && next.size() < beam; ++i) {
      const auto& c = cands[i];
      if (c.token == Vocab::kEos && i >= beam) continue;
      Hypothesis h = live[c.parent];
      const auto& r = results[c.parent];
      StepTrace st;
      st.step = t;
      st.chosen = c.token;
      st.query = r.query;
      st.neighbors = r.neighbors;
      st.p_nmt = summarize(r.p_nmt, c.token, verbose_trace);
      if (r.p_knn) st.p_knn = summarize(*r.p_knn, c.token, verbose_trace);
      st.p_final = summarize(r.p_final, c.token, verbose_trace);
      st.option_weights = r.option_weights;
      h.trace.push_back(std::move(st));
      h.tokens.push_back(c.token);
      h.score = c.score;
      (c.token == Vocab::kEos ? finished : next).push_back(std::move(h));
    }
    live = std::move(next);
    if (finished.size() >= beam) break;
  }

  // Final choice by mean log-probability per emitted token, so short
  // hypotheses do not win on length alone.
  auto normalized = [](const Hypothesis& h) {
    return h.score / static_cast<double>(std::max<std::size_t>(h.tokens.size(), 1));
  };
  const Hypothesis* best = nullptr;
  bool best_finished = false;
  for (const auto& f : finished) {
    if (best == nullptr || normalized(f) > normalized(*best)) {
      best = &f;
      best_finished = true;
    }
  }
  if (best == nullptr) {
    for (const auto& l : live) {
      if (best == nullptr || normalized(l) > normalized(*best)) best = &l;
    }
  }
  Generation g;
  g.finished = best_finished;
  g.score = best->score;
  g.trace = best->trace;
  g.tokens = best->tokens;
  if (!g.tokens.empty() && g.tokens.back() == Vocab::kEos) g.tokens.pop_back();
  return g;
}

EvalReport Pipeline::evaluate(const ParallelCorpus& test, EvalMode mode, std::size_t beam,
                              std::size_t max_len, std::size_t threads) const {
  if (test.empty()) throw InvalidArgument("evaluate: empty test set");
  for (const auto& p : test.pairs()) {
    model_->check_ids(p.source);
    model_->check_ids(p.target);
  }
  EvalReport report;
  report.mode = mode;
  report.sentences = test.size();
  report.metadata = describe();
  report.metadata["corpus"] = test.name();

  if (mode == EvalMode::kTeacherForced) {
    std::vector<TokenScorer> per(test.size());
    parallel_for(test.size(), threads, [&](std::size_t i) {
      const auto& pair = test[i];
      auto ctx = model_->source_context(pair.source);
      for (std::size_t t = 0; t < pair.target.size(); ++t) {
        auto r = step(ctx, std::span(pair.target).first(t));
        per[i].add(r.p_final, pair.target[t]);
      }
    });
    TokenScorer total;
    for (const auto& s : per) total.merge(s);
    report.tokens = total.tokens();
    report.accuracy = total.accuracy();
    report.perplexity = total.perplexity();
    report.metadata["probability_floor"] = TokenScorer::kProbabilityFloor;
    return report;
  }

  std::vector<std::vector<TokenId>> hyps(test.size());
  std::vector<std::vector<TokenId>> refs(test.size());
  parallel_for(test.size(), threads, [&](std::size_t i) {
    hyps[i] = generate(test[i].source, beam, max_len).tokens;
    auto ref = test[i].target;
    if (!ref.empty() && ref.back() == Vocab::kEos) ref.pop_back();
    refs[i] = std::move(ref);
  });
  std::size_t tokens = 0;
  for (const auto& h : hyps) tokens += h.size();
  report.tokens = tokens;
  report.bleu = corpus_bleu(hyps, refs);
  report.metadata["beam"] = beam;
  report.metadata["max_len"] = max_len;
  return report;
}

nlohmann::json Pipeline::describe() const {
  nlohmann::json j{{"model_fp", hex64(model_->fingerprint())},
                   {"dim", model_->dim()},
                   {"vocab_size", model_->vocab_size()},
                   {"lambda", combiner_.lambda},
                   {"temperature", combiner_.temperature},
                   {"k", combiner_.k},
                   {"variant", to_string(combiner_.variant)},
                   {"retriever", ivf_ ? "ivf" : "exact"}};
  if (datastore_) {
    nlohmann::json chain = nlohmann::json::array();
    for (const auto& t : datastore_->meta().transforms) chain.push_back(t.kind);
    j["datastore"] = {{"n", datastore_->size()},
                      {"dim", datastore_->dim()},
                      {"scale", datastore_->scale()},
                      {"corpus", datastore_->meta().corpus},
                      {"transforms", chain}};
  } else {
    j["datastore"] = nullptr;
  }
  if (ivf_) j["nprobe"] = nprobe_.value_or(ivf_->nprobe());
  return j;
}

}  // namespace knnmt
