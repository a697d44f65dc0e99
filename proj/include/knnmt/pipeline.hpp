#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "knnmt/combiner.hpp"
#include "knnmt/compression.hpp"
#include "knnmt/datastore.hpp"
#include "knnmt/metrics.hpp"
#include "knnmt/model.hpp"
#include "knnmt/retriever.hpp"

namespace knnmt {

// File locations plus decoding settings. Only the model is mandatory;
// without a datastore the pipeline decodes with the base model alone.
struct PipelineConfig {
  std::filesystem::path model;
  std::optional<std::filesystem::path> datastore;
  std::optional<std::filesystem::path> ivf;
  std::optional<std::filesystem::path> pca;
  std::optional<std::filesystem::path> metanet;
  CombinerConfig combiner;
  std::optional<std::size_t> nprobe;
  std::size_t beam = 1;
  std::size_t max_len = 32;
  std::size_t threads = 1;
  bool verbose_trace = false;
};

struct TokenProb {
  TokenId token = 0;
  double prob = 0.0;
};

// Top-10 view of a distribution; `full` is only filled in verbose traces.
struct DistributionSummary {
  std::vector<TokenProb> top;
  double chosen_prob = 0.0;
  double other_mass = 0.0;
  std::vector<double> full;
};

DistributionSummary summarize(const Distribution& p, TokenId chosen, bool verbose,
                              std::size_t top_n = 10);

struct StepTrace {
  std::size_t step = 0;
  TokenId chosen = 0;
  std::vector<float> query;
  NeighborSet neighbors;
  DistributionSummary p_nmt;
  std::optional<DistributionSummary> p_knn;
  DistributionSummary p_final;
  std::vector<double> option_weights;  // adaptive variant only
};

struct Generation {
  std::vector<TokenId> tokens;  // without the trailing eos
  bool finished = false;        // stopped at eos rather than max_len
  double score = 0.0;           // sum of log p_final over emitted tokens
  std::vector<StepTrace> trace; // one per emitted token, eos included
};

enum class EvalMode { kTeacherForced, kFreeRunning };
EvalMode parse_eval_mode(std::string_view s);
std::string_view to_string(EvalMode m);

struct EvalReport {
  EvalMode mode = EvalMode::kTeacherForced;
  std::size_t sentences = 0;
  std::size_t tokens = 0;       // scored gold tokens, or emitted tokens when free running
  double accuracy = 0.0;        // teacher-forced only
  double perplexity = 0.0;
  std::optional<BleuScore> bleu;
  nlohmann::json metadata = nlohmann::json::object();

  nlohmann::json to_json() const;
};

// Accumulates teacher-forced token statistics. Probabilities below
// kProbabilityFloor are clamped before taking the log.
class TokenScorer {
 public:
  static constexpr double kProbabilityFloor = 1e-12;

  void add(const Distribution& p, TokenId gold);
  void merge(const TokenScorer& other);
  std::size_t tokens() const { return tokens_; }
  double accuracy() const;
  double perplexity() const;

 private:
  std::size_t tokens_ = 0;
  std::size_t correct_ = 0;
  double nll_ = 0.0;
};

// Everything computed at one decoding step.
struct StepResult {
  std::vector<double> hidden;
  std::vector<float> query;
  NeighborSet neighbors;
  Distribution p_nmt;
  std::optional<Distribution> p_knn;
  Distribution p_final;
  std::vector<double> option_weights;
};

// Model + optional datastore/IVF/PCA/meta network, combined under one
// CombinerConfig. Artifacts are shared and immutable; the pipeline itself
// is cheap to copy, so per-request overrides build a new one.
class Pipeline {
 public:
  Pipeline(std::shared_ptr<const BaseModel> model, std::shared_ptr<const Datastore> datastore,
           CombinerConfig combiner, std::shared_ptr<const IvfIndex> ivf = nullptr,
           std::shared_ptr<const PcaTransform> pca = nullptr,
           std::shared_ptr<const MetaNet> metanet = nullptr,
           std::optional<std::size_t> nprobe = std::nullopt);

  // Loads and cross-checks every artifact named in `cfg`.
  static Pipeline load(const PipelineConfig& cfg);

  Pipeline with_combiner(const CombinerConfig& combiner) const;

  const BaseModel& model() const { return *model_; }
  const Datastore* datastore() const { return datastore_.get(); }
  const MetaNet* metanet() const { return metanet_.get(); }
  const IvfIndex* ivf() const { return ivf_.get(); }
  const PcaTransform* pca() const { return pca_.get(); }
  const CombinerConfig& combiner() const { return combiner_; }
  bool retrieval_enabled() const { return datastore_ != nullptr; }

  StepResult step(std::span<const double> source_context, std::span<const TokenId> prefix) const;
  StepResult step(std::span<const TokenId> source, std::span<const TokenId> prefix) const;

  // Beam search over log p_final; beam 1 is greedy argmax decoding. Stops once
  // `beam` hypotheses end in eos and returns the one with the best mean
  // log-probability per token.
  Generation generate(std::span<const TokenId> source, std::size_t beam, std::size_t max_len,
                      bool verbose_trace = false) const;

  EvalReport evaluate(const ParallelCorpus& test, EvalMode mode, std::size_t beam = 1,
                      std::size_t max_len = 32, std::size_t threads = 1) const;

  nlohmann::json describe() const;

 private:
  std::shared_ptr<const BaseModel> model_;
  std::shared_ptr<const Datastore> datastore_;
  std::shared_ptr<const IvfIndex> ivf_;
  std::shared_ptr<const PcaTransform> pca_;
  std::shared_ptr<const MetaNet> metanet_;
  std::optional<std::size_t> nprobe_;
  CombinerConfig combiner_;
  std::optional<Retriever> retriever_;
};

// Runs `fn(i)` for i in [0, n) across `threads` workers.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

}  // namespace knnmt
