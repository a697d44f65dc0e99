#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "knnmt/datastore.hpp"

namespace knnmt {

struct Neighbor {
  std::size_t index = 0;  // entry index in the datastore
  double distance = 0.0;  // L2-square
  TokenId value = 0;
  Provenance provenance;
  std::vector<float> key;
};

// Sorted by ascending distance, ties by lower entry index.
struct NeighborSet {
  std::vector<Neighbor> items;

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
  const Neighbor& operator[](std::size_t i) const { return items[i]; }
  // Top-`n` prefix.
  NeighborSet prefix(std::size_t n) const;
};

double l2_square(std::span<const float> a, std::span<const float> b);

// Exhaustive scan.
NeighborSet search_exact(const Datastore& ds, std::span<const float> query, std::size_t k);

// Results are in query order. `threads` <= 1 runs inline.
std::vector<NeighborSet> search_exact_batch(const Datastore& ds, std::span<const float> queries,
                                            std::size_t k, std::size_t threads = 1);

// Inverted-file index: k-means coarse centroids plus one entry list per centroid.
//
// ivf.bin layout (little-endian):
//   "KNNBXIVF", u32 clusters, u32 dim, u32 default nprobe, u64 datastore fingerprint,
//   clusters*dim float32 centroids, (clusters+1) u64 list offsets, u32 entry ids
class IvfIndex {
 public:
  IvfIndex(std::size_t dim, std::vector<float> centroids, std::vector<std::uint64_t> offsets,
           std::vector<std::uint32_t> ids, std::size_t nprobe, std::uint64_t datastore_fp);

  std::size_t clusters() const { return offsets_.size() - 1; }
  std::size_t dim() const { return dim_; }
  std::size_t nprobe() const { return nprobe_; }
  std::uint64_t datastore_fingerprint() const { return datastore_fp_; }
  std::span<const float> centroid(std::size_t c) const {
    return std::span(centroids_).subspan(c * dim_, dim_);
  }
  std::span<const std::uint32_t> list(std::size_t c) const;

  // The `nprobe` centroids closest to `query`, nearest first.
  std::vector<std::size_t> probe_order(std::span<const float> query, std::size_t nprobe) const;

  void save(const std::filesystem::path& path) const;
  static IvfIndex load(const std::filesystem::path& path);

 private:
  std::size_t dim_;
  std::vector<float> centroids_;
  std::vector<std::uint64_t> offsets_;
  std::vector<std::uint32_t> ids_;
  std::size_t nprobe_;
  std::uint64_t datastore_fp_;
};

struct IvfBuildOptions {
  std::size_t clusters = 64;
  int iterations = 20;
  std::uint64_t seed = 1;
  std::size_t nprobe = 8;
};

// k-means++ seeding and Lloyd iterations. When `objective` is given it
// receives the sum of squared distances after every assignment step.
IvfIndex build_ivf(const Datastore& ds, const IvfBuildOptions& opts,
                   std::vector<double>* objective = nullptr);

// Exact search restricted to the lists of the `nprobe` closest centroids
// (the index default when unset). Throws StaleArtifact on a foreign store.
NeighborSet search_ivf(const Datastore& ds, const IvfIndex& index, std::span<const float> query,
                       std::size_t k, std::optional<std::size_t> nprobe = std::nullopt);

class PcaTransform;

// Query path into one datastore: optional PCA projection of the hidden
// state, then an exact scan or an IVF probe. Does not own its artifacts.
class Retriever {
 public:
  // Throws StaleArtifact if the IVF index or PCA transform does not match
  // the store (a PCA-reduced store requires its transform).
  explicit Retriever(const Datastore& ds, const IvfIndex* ivf = nullptr,
                     const PcaTransform* pca = nullptr,
                     std::optional<std::size_t> nprobe = std::nullopt);

  // Model hidden state -> datastore key space.
  std::vector<float> encode(std::span<const double> hidden) const;
  NeighborSet search(std::span<const float> query, std::size_t k) const;
  NeighborSet search_hidden(std::span<const double> hidden, std::size_t k) const {
    return search(encode(hidden), k);
  }

  const Datastore& datastore() const { return *ds_; }
  bool approximate() const { return ivf_ != nullptr; }

 private:
  const Datastore* ds_;
  const IvfIndex* ivf_;
  const PcaTransform* pca_;
  std::optional<std::size_t> nprobe_;
};

}  // namespace knnmt
