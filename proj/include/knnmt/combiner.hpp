#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "knnmt/distribution.hpp"
#include "knnmt/model.hpp"
#include "knnmt/retriever.hpp"

namespace knnmt {

enum class CombinerVariant { kBasic, kAdaptive };

std::string_view to_string(CombinerVariant v);
CombinerVariant parse_variant(std::string_view s);

struct CombinerConfig {
  double lambda = 0.5;
  double temperature = 10.0;
  std::size_t k = 8;
  CombinerVariant variant = CombinerVariant::kBasic;

  // Throws InvalidArgument on lambda outside [0,1], T <= 0 or k == 0.
  void validate() const;
};

// p_knn(y) proportional to the sum over neighbors with value y of exp(-d/T).
// Tokens outside the neighbor values get exactly 0.
Distribution knn_distribution(const NeighborSet& neighbors, double temperature,
                              std::size_t vocab_size);

// lambda * p_knn + (1 - lambda) * p_nmt
Distribution interpolate(const Distribution& p_knn, const Distribution& p_nmt, double lambda);

// Two-layer perceptron choosing how many of the k neighbors to trust.
// Input: the k distances followed by, for each j, the number of distinct
// values among the first j neighbors. Output: softmax over {0, 1, ..., k}.
struct MetaNetWeights {
  std::vector<double> w1;  // hidden x 2k
  std::vector<double> b1;  // hidden
  std::vector<double> w2;  // (k+1) x hidden
  std::vector<double> b2;  // k+1

  std::array<std::vector<double>*, 4> tensors() { return {&w1, &b1, &w2, &b2}; }
  std::array<const std::vector<double>*, 4> tensors() const { return {&w1, &b1, &w2, &b2}; }
};

class MetaNet {
 public:
  static constexpr std::uint32_t kFeatureLayout = 1;

  MetaNet(std::size_t k, std::size_t hidden = 32);
  static MetaNet initialize(std::size_t k, std::size_t hidden, std::uint64_t seed);

  std::size_t k() const { return k_; }
  std::size_t hidden() const { return hidden_; }
  std::size_t num_features() const { return 2 * k_; }
  std::size_t num_options() const { return k_ + 1; }

  MetaNetWeights& weights() { return w_; }
  const MetaNetWeights& weights() const { return w_; }

  // Throws InvalidArgument unless |neighbors| == k.
  std::vector<double> features(const NeighborSet& neighbors) const;
  Distribution option_weights(std::span<const double> features) const;
  Distribution option_weights(const NeighborSet& neighbors) const {
    return option_weights(features(neighbors));
  }

  std::vector<std::byte> serialize() const;
  static MetaNet deserialize(std::span<const std::byte> bytes);
  void save(const std::filesystem::path& path) const;
  static MetaNet load(const std::filesystem::path& path);

  void round_to_float();

 private:
  std::size_t k_;
  std::size_t hidden_;
  MetaNetWeights w_;
};

inline constexpr std::string_view kMetaNetMagic = "KNNBX00M";

// w_0 * p_nmt + sum_i w_i * knn_distribution(top-i neighbors).
Distribution adaptive_combine(const MetaNet& net, const NeighborSet& neighbors,
                              const Distribution& p_nmt, double temperature);

// One held-out target token reduced to what the meta network needs: its
// features and the gold-token probability under each of the k+1 options.
struct MetaNetExample {
  std::vector<double> features;
  std::vector<double> option_gold_prob;
};

MetaNetExample make_metanet_example(const MetaNet& net, const NeighborSet& neighbors,
                                    const Distribution& p_nmt, TokenId gold, double temperature);

// Mean negative log-likelihood of the gold tokens; gradient into `grad`.
double metanet_loss_and_gradient(const MetaNet& net, std::span<const MetaNetExample> examples,
                                 MetaNetWeights& grad);

struct MetaNetTrainOptions {
  int epochs = 100;
  double lr = 0.003;  // Adam step size
  std::size_t batch = 16;
  std::uint64_t seed = 1;
  double temperature = 10.0;
};

struct MetaNetTrainReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::size_t examples = 0;
};

// Teacher-forced pass over `heldout`, then mini-batch Adam on the mixture NLL.
MetaNetTrainReport train_metanet(MetaNet& net, const BaseModel& model, const Retriever& retriever,
                                 const ParallelCorpus& heldout, const MetaNetTrainOptions& opts);

// The same optimizer on precomputed examples.
MetaNetTrainReport train_metanet(MetaNet& net, std::span<const MetaNetExample> examples,
                                 const MetaNetTrainOptions& opts);

}  // namespace knnmt
