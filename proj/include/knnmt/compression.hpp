#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "json.hpp"
#include "knnmt/corpus.hpp"
#include "knnmt/datastore.hpp"
#include "knnmt/model.hpp"

namespace knnmt {

// x -> components * (x - mean). Rows of `components` are orthonormal
// principal directions, strongest first.
//
// pca.bin layout: "KNNBXPCA", u32 d, u32 d', d float32 mean, d'*d float32 components
class PcaTransform {
 public:
  PcaTransform(std::size_t input_dim, std::size_t output_dim, std::vector<double> mean,
               std::vector<double> components, std::vector<double> explained = {});

  std::size_t input_dim() const { return input_dim_; }
  std::size_t output_dim() const { return output_dim_; }
  std::span<const double> mean() const { return mean_; }
  std::span<const double> component(std::size_t i) const {
    return std::span(components_).subspan(i * input_dim_, input_dim_);
  }
  // Per-component share of total variance; empty when loaded from disk.
  const std::vector<double>& explained_variance_ratio() const { return explained_; }

  std::vector<float> apply(std::span<const float> x) const;
  std::vector<float> apply(std::span<const double> x) const;

  std::vector<std::byte> serialize() const;
  void save(const std::filesystem::path& path) const;
  static PcaTransform load(const std::filesystem::path& path);
  std::uint64_t fingerprint() const;

 private:
  std::size_t input_dim_;
  std::size_t output_dim_;
  std::vector<double> mean_;
  std::vector<double> components_;
  std::vector<double> explained_;
};

struct PcaOptions {
  int max_iterations = 200;
  double tolerance = 1e-8;
  std::uint64_t seed = 1;
};

// Top-`output_dim` eigenvectors of the covariance of `n` row-major points,
// by orthogonal iteration with a final Rayleigh-Ritz rotation. Throws on
// fewer than two points or zero total variance.
PcaTransform fit_pca(std::span<const float> points, std::size_t n, std::size_t dim,
                     std::size_t output_dim, const PcaOptions& opts = {});
PcaTransform fit_pca(const Datastore& ds, std::size_t output_dim, const PcaOptions& opts = {});

// New store with transformed keys; values and provenance carried over.
Datastore apply_pca(const Datastore& ds, const PcaTransform& pca);

// Eigen-decomposition of a small symmetric matrix by cyclic Jacobi rotations.
// Returns eigenvalues descending; `vectors` receives them as columns.
std::vector<double> symmetric_eigen(std::vector<double> matrix, std::size_t n,
                                    std::vector<double>& vectors);

struct PruneReport {
  std::size_t kept = 0;
  std::size_t dropped = 0;
  double scale = 1.0;
  std::string method;
  nlohmann::json params = nlohmann::json::object();

  nlohmann::json to_json() const;
};

struct RedundancyOptions {
  std::size_t neighbors = 2;              // k_p
  std::optional<double> threshold;        // theta; median NN distance of a sample when unset
  std::size_t threshold_sample = 1000;
  std::uint64_t seed = 1;
};

// Median nearest-neighbor distance (excluding self) over a seeded sample.
double median_neighbor_distance(const Datastore& ds, std::size_t sample, std::uint64_t seed);

// Greedy pass in entry order: drop an entry when its k_p nearest remaining
// neighbors all carry its value and the nearest lies within theta.
std::pair<Datastore, PruneReport> prune_redundant(const Datastore& ds, const RedundancyOptions& opts);

// Drops every entry whose gold value the base model already ranks within its
// top `rank` tokens at the entry's context. Contexts are recomputed from the
// corpus the store was built from.
std::pair<Datastore, PruneReport> prune_knowledge_margin(const Datastore& ds, const BaseModel& model,
                                                         const ParallelCorpus& corpus,
                                                         std::size_t rank);

// Noisy-store scenario: re-labels round(fraction * n) seeded-random entries
// with a uniformly drawn non-special token different from the original.
Datastore corrupt_values(const Datastore& ds, double fraction, std::size_t vocab_size,
                         std::uint64_t seed);

// Zero-based rank of `token` in `p`: tokens with higher probability, or equal
// probability and a lower id, come first.
std::size_t token_rank(const Distribution& p, TokenId token);

}  // namespace knnmt
