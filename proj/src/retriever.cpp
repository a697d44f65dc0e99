#include "knnmt/retriever.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <thread>

#include "knnmt/compression.hpp"
#include "knnmt/rng.hpp"

namespace knnmt {
namespace {

constexpr std::string_view kIvfMagic = "KNNBXIVF";

using Candidate = std::pair<double, std::size_t>;  // (distance, index), compared lexicographically

// Bounded max-heap over (distance, index).
class TopK {
 public:
  explicit TopK(std::size_t k) : k_(k) {}

  void push(double dist, std::size_t idx) {
    if (heap_.size() < k_) {
      heap_.push({dist, idx});
    } else if (Candidate{dist, idx} < heap_.top()) {
      heap_.pop();
      heap_.push({dist, idx});
    }
  }

  std::vector<Candidate> sorted() {
    std::vector<Candidate> out;
    out.reserve(heap_.size());
    while (!heap_.empty()) {
      out.push_back(heap_.top());
      heap_.pop();
    }
    std::reverse(out.begin(), out.end());
    return out;
  }

 private:
  std::size_t k_;
  std::priority_queue<Candidate> heap_;
};

NeighborSet materialize(const Datastore& ds, const std::vector<Candidate>& cands) {
  NeighborSet out;
  out.items.reserve(cands.size());
  for (const auto& [dist, idx] : cands) {
    auto k = ds.key(idx);
    out.items.push_back({idx, dist, ds.value(idx), ds.provenance()[idx], {k.begin(), k.end()}});
  }
  return out;
}

void check_query(const Datastore& ds, std::span<const float> query, std::size_t k) {
  if (ds.empty()) throw InvalidArgument("search on an empty datastore");
  if (k == 0) throw InvalidArgument("k must be >= 1");
  if (query.size() != ds.dim()) {
    throw InvalidArgument("query dimension " + std::to_string(query.size()) +
                          " does not match datastore dimension " + std::to_string(ds.dim()));
  }
  for (float v : query) {
    if (!std::isfinite(v)) throw InvalidArgument("query has a non-finite component");
  }
}

double l2_square_d(std::span<const float> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace

NeighborSet NeighborSet::prefix(std::size_t n) const {
  NeighborSet out;
  out.items.assign(items.begin(), items.begin() + static_cast<std::ptrdiff_t>(std::min(n, items.size())));
  return out;
}

double l2_square(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s;
}

NeighborSet search_exact(const Datastore& ds, std::span<const float> query, std::size_t k) {
  check_query(ds, query, k);
  TopK top(k);
  for (std::size_t i = 0; i < ds.size(); ++i) top.push(l2_square(query, ds.key(i)), i);
  return materialize(ds, top.sorted());
}

std::vector<NeighborSet> search_exact_batch(const Datastore& ds, std::span<const float> queries,
                                            std::size_t k, std::size_t threads) {
  if (queries.size() % ds.dim() != 0) throw InvalidArgument("batched queries are not a multiple of dim");
  const std::size_t nq = queries.size() / ds.dim();
  std::vector<NeighborSet> out(nq);
  auto run = [&](std::size_t begin, std::size_t end) {
    for (std::size_t q = begin; q < end; ++q) {
      out[q] = search_exact(ds, queries.subspan(q * ds.dim(), ds.dim()), k);
    }
  };
  threads = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(nq, 1));
  if (threads == 1) {
    run(0, nq);
    return out;
  }
  std::vector<std::jthread> pool;
  const std::size_t chunk = (nq + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    std::size_t b = t * chunk;
    std::size_t e = std::min(nq, b + chunk);
    if (b < e) pool.emplace_back(run, b, e);
  }
  pool.clear();  // joins
  return out;
}

IvfIndex::IvfIndex(std::size_t dim, std::vector<float> centroids,
                   std::vector<std::uint64_t> offsets, std::vector<std::uint32_t> ids,
                   std::size_t nprobe, std::uint64_t datastore_fp)
    : dim_(dim), centroids_(std::move(centroids)), offsets_(std::move(offsets)),
      ids_(std::move(ids)), nprobe_(nprobe), datastore_fp_(datastore_fp) {
  if (offsets_.size() < 2) throw FormatError("ivf: needs at least one cluster");
  if (centroids_.size() != clusters() * dim_) throw FormatError("ivf: centroid block size mismatch");
  if (offsets_.front() != 0 || offsets_.back() != ids_.size() ||
      !std::is_sorted(offsets_.begin(), offsets_.end())) {
    throw FormatError("ivf: inconsistent list offsets");
  }
  if (nprobe_ < 1 || nprobe_ > clusters()) {
    throw InvalidArgument("ivf: nprobe must be in [1, clusters]");
  }
}

std::span<const std::uint32_t> IvfIndex::list(std::size_t c) const {
  return std::span(ids_).subspan(offsets_[c], offsets_[c + 1] - offsets_[c]);
}

std::vector<std::size_t> IvfIndex::probe_order(std::span<const float> query,
                                               std::size_t nprobe) const {
  std::vector<Candidate> d(clusters());
  for (std::size_t c = 0; c < clusters(); ++c) d[c] = {l2_square(query, centroid(c)), c};
  nprobe = std::min(nprobe, clusters());
  std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(nprobe), d.end());
  std::vector<std::size_t> out(nprobe);
  for (std::size_t i = 0; i < nprobe; ++i) out[i] = d[i].second;
  return out;
}

void IvfIndex::save(const std::filesystem::path& path) const {
  ByteWriter w;
  w.magic(kIvfMagic);
  w.u32(static_cast<std::uint32_t>(clusters()));
  w.u32(static_cast<std::uint32_t>(dim_));
  w.u32(static_cast<std::uint32_t>(nprobe_));
  w.u64(datastore_fp_);
  w.f32s(centroids_);
  for (auto o : offsets_) w.u64(o);
  w.u32s(ids_);
  write_file(path, w.data());
}

IvfIndex IvfIndex::load(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  ByteReader r(bytes, path.filename().string());
  r.expect_magic(kIvfMagic);
  std::size_t c = r.u32();
  std::size_t d = r.u32();
  std::size_t nprobe = r.u32();
  std::uint64_t fp = r.u64();
  if (c == 0 || d == 0) throw FormatError("ivf: empty header");
  auto centroids = r.f32s(c * d);
  std::vector<std::uint64_t> offsets(c + 1);
  for (auto& o : offsets) o = r.u64();
  if (offsets.back() > r.remaining() / sizeof(std::uint32_t)) throw FormatError("ivf: truncated id block");
  auto ids = r.u32s(offsets.back());
  r.expect_end();
  return IvfIndex(d, std::move(centroids), std::move(offsets), std::move(ids), nprobe, fp);
}

IvfIndex build_ivf(const Datastore& ds, const IvfBuildOptions& opts, std::vector<double>* objective) {
  const std::size_t n = ds.size();
  const std::size_t c = opts.clusters;
  const std::size_t d = ds.dim();
  if (c == 0) throw InvalidArgument("ivf: cluster count must be >= 1");
  if (c > n) {
    throw InvalidArgument("ivf: " + std::to_string(c) + " clusters for only " + std::to_string(n) +
                          " entries");
  }
  if (opts.nprobe < 1) throw InvalidArgument("ivf: nprobe must be >= 1");
  const std::size_t nprobe = std::min(opts.nprobe, c);
  if (opts.iterations < 0) throw InvalidArgument("ivf: negative iteration count");

  Rng rng(opts.seed);
  std::vector<double> cent(c * d);
  auto set_centroid = [&](std::size_t ci, std::size_t entry) {
    auto k = ds.key(entry);
    std::copy(k.begin(), k.end(), cent.begin() + static_cast<std::ptrdiff_t>(ci * d));
  };
  auto cspan = [&](std::size_t ci) { return std::span<const double>(cent).subspan(ci * d, d); };

  // k-means++ seeding
  std::vector<double> best(n, std::numeric_limits<double>::infinity());
  set_centroid(0, rng.below(n));
  for (std::size_t ci = 1; ci < c; ++ci) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      best[i] = std::min(best[i], l2_square_d(ds.key(i), cspan(ci - 1)));
      total += best[i];
    }
    std::size_t pick = n - 1;
    if (total > 0.0) {
      double r = rng.uniform() * total;
      for (std::size_t i = 0; i < n; ++i) {
        r -= best[i];
        if (r < 0.0 && best[i] > 0.0) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.below(n);
    }
    set_centroid(ci, pick);
  }

  std::vector<std::size_t> assign(n, 0);
  std::vector<double> dist(n, 0.0);
  auto assign_all = [&]() {
    double obj = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double bd = std::numeric_limits<double>::infinity();
      std::size_t bc = 0;
      for (std::size_t ci = 0; ci < c; ++ci) {
        double dd = l2_square_d(ds.key(i), cspan(ci));
        if (dd < bd) {
          bd = dd;
          bc = ci;
        }
      }
      assign[i] = bc;
      dist[i] = bd;
      obj += bd;
    }
    if (objective != nullptr) objective->push_back(obj);
  };

  std::vector<std::size_t> counts(c);
  for (int it = 0; it < opts.iterations; ++it) {
    auto previous = assign;
    assign_all();
    if (it > 0 && previous == assign) break;

    std::fill(cent.begin(), cent.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto k = ds.key(i);
      double* row = &cent[assign[i] * d];
      for (std::size_t j = 0; j < d; ++j) row[j] += k[j];
      ++counts[assign[i]];
    }
    for (std::size_t ci = 0; ci < c; ++ci) {
      if (counts[ci] == 0) continue;
      for (std::size_t j = 0; j < d; ++j) cent[ci * d + j] /= static_cast<double>(counts[ci]);
    }
    // Empty clusters take over the farthest member of the largest cluster.
    for (std::size_t ci = 0; ci < c; ++ci) {
      if (counts[ci] != 0) continue;
      auto largest = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
      std::size_t far = n;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (assign[i] != largest) continue;
        double dd = l2_square_d(ds.key(i), cspan(largest));
        if (dd > far_d) {
          far_d = dd;
          far = i;
        }
      }
      set_centroid(ci, far);
      assign[far] = ci;
      --counts[largest];
      counts[ci] = 1;
    }
  }
  assign_all();

  std::vector<std::uint64_t> offsets(c + 1, 0);
  for (std::size_t i = 0; i < n; ++i) ++offsets[assign[i] + 1];
  for (std::size_t ci = 0; ci < c; ++ci) offsets[ci + 1] += offsets[ci];
  std::vector<std::uint32_t> ids(n);
  auto cursor = offsets;
  for (std::size_t i = 0; i < n; ++i) ids[cursor[assign[i]]++] = static_cast<std::uint32_t>(i);

  std::vector<float> centroids(cent.begin(), cent.end());
  return IvfIndex(d, std::move(centroids), std::move(offsets), std::move(ids), nprobe,
                  ds.fingerprint());
}

NeighborSet search_ivf(const Datastore& ds, const IvfIndex& index, std::span<const float> query,
                       std::size_t k, std::optional<std::size_t> nprobe) {
  check_query(ds, query, k);
  if (index.datastore_fingerprint() != ds.fingerprint()) {
    throw StaleArtifact("ivf index was built over datastore " + hex64(index.datastore_fingerprint()) +
                        ", not " + hex64(ds.fingerprint()));
  }
  std::size_t np = nprobe.value_or(index.nprobe());
  if (np < 1 || np > index.clusters()) throw InvalidArgument("nprobe must be in [1, clusters]");
  TopK top(k);
  for (std::size_t c : index.probe_order(query, np)) {
    for (std::uint32_t i : index.list(c)) top.push(l2_square(query, ds.key(i)), i);
  }
  return materialize(ds, top.sorted());
}

Retriever::Retriever(const Datastore& ds, const IvfIndex* ivf, const PcaTransform* pca,
                     std::optional<std::size_t> nprobe)
    : ds_(&ds), ivf_(ivf), pca_(pca), nprobe_(nprobe) {
  if (ivf_ != nullptr && ivf_->datastore_fingerprint() != ds.fingerprint()) {
    throw StaleArtifact("ivf index does not belong to this datastore");
  }
  const TransformRecord* pca_record = nullptr;
  for (const auto& t : ds.meta().transforms) {
    if (t.kind == "pca") pca_record = &t;
  }
  if (pca_record == nullptr && pca_ != nullptr) {
    throw StaleArtifact("a PCA transform was supplied but the datastore keys are not reduced");
  }
  if (pca_record != nullptr) {
    if (pca_ == nullptr) throw StaleArtifact("datastore keys are PCA-reduced; the transform is required");
    if (pca_record->params.value("pca_fp", std::string()) != hex64(pca_->fingerprint())) {
      throw StaleArtifact("PCA transform does not match the one recorded in the datastore");
    }
  }
}

std::vector<float> Retriever::encode(std::span<const double> hidden) const {
  if (pca_ != nullptr) return pca_->apply(hidden);
  return {hidden.begin(), hidden.end()};
}

NeighborSet Retriever::search(std::span<const float> query, std::size_t k) const {
  return ivf_ != nullptr ? search_ivf(*ds_, *ivf_, query, k, nprobe_) : search_exact(*ds_, query, k);
}

}  // namespace knnmt
