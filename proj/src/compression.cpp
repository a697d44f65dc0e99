#include "knnmt/compression.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "knnmt/retriever.hpp"
#include "knnmt/rng.hpp"

namespace knnmt {
namespace {

constexpr std::string_view kPcaMagic = "KNNBXPCA";

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Modified Gram-Schmidt over the columns of a row-major dim x cols matrix.
// A column that collapses is replaced by a fresh random direction.
void orthonormalize(std::vector<double>& q, std::size_t dim, std::size_t cols, Rng& rng) {
  std::vector<double> col(dim);
  for (std::size_t c = 0; c < cols; ++c) {
    for (std::size_t i = 0; i < dim; ++i) col[i] = q[i * cols + c];
    double original = std::sqrt(dot(col, col));
    for (int attempt = 0;; ++attempt) {
      for (std::size_t p = 0; p < c; ++p) {
        double proj = 0.0;
        for (std::size_t i = 0; i < dim; ++i) proj += q[i * cols + p] * col[i];
        for (std::size_t i = 0; i < dim; ++i) col[i] -= proj * q[i * cols + p];
      }
      double norm = std::sqrt(dot(col, col));
      if (norm > 1e-10 * std::max(original, 1.0)) {
        for (std::size_t i = 0; i < dim; ++i) q[i * cols + c] = col[i] / norm;
        break;
      }
      if (attempt > 8) throw Error("orthonormalize: could not complete the basis");
      for (double& v : col) v = rng.normal();
      original = std::sqrt(dot(col, col));
    }
  }
}

}  // namespace

PcaTransform::PcaTransform(std::size_t input_dim, std::size_t output_dim, std::vector<double> mean,
                           std::vector<double> components, std::vector<double> explained)
    : input_dim_(input_dim), output_dim_(output_dim), mean_(std::move(mean)),
      components_(std::move(components)), explained_(std::move(explained)) {
  if (output_dim_ < 1 || output_dim_ > input_dim_) throw InvalidArgument("pca: need 1 <= d' <= d");
  if (mean_.size() != input_dim_ || components_.size() != input_dim_ * output_dim_) {
    throw FormatError("pca: tensor sizes disagree with dimensions");
  }
}

std::vector<float> PcaTransform::apply(std::span<const double> x) const {
  if (x.size() != input_dim_) throw InvalidArgument("pca: input dimension mismatch");
  std::vector<double> centered(input_dim_);
  for (std::size_t i = 0; i < input_dim_; ++i) centered[i] = x[i] - mean_[i];
  std::vector<float> out(output_dim_);
  for (std::size_t r = 0; r < output_dim_; ++r) out[r] = static_cast<float>(dot(component(r), centered));
  return out;
}

std::vector<float> PcaTransform::apply(std::span<const float> x) const {
  std::vector<double> xd(x.begin(), x.end());
  return apply(std::span<const double>(xd));
}

std::vector<std::byte> PcaTransform::serialize() const {
  ByteWriter w;
  w.magic(kPcaMagic);
  w.u32(static_cast<std::uint32_t>(input_dim_));
  w.u32(static_cast<std::uint32_t>(output_dim_));
  w.f32s_from(mean_);
  w.f32s_from(components_);
  return w.data();
}

void PcaTransform::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

PcaTransform PcaTransform::load(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  ByteReader r(bytes, path.filename().string());
  r.expect_magic(kPcaMagic);
  std::size_t d = r.u32();
  std::size_t dp = r.u32();
  auto mean = r.f32s_as_double(d);
  auto comps = r.f32s_as_double(d * dp);
  r.expect_end();
  return PcaTransform(d, dp, std::move(mean), std::move(comps));
}

std::uint64_t PcaTransform::fingerprint() const { return fnv1a(serialize()); }

std::vector<double> symmetric_eigen(std::vector<double> a, std::size_t n, std::vector<double>& vectors) {
  vectors.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) vectors[i * n + i] = 1.0;
  double total = 0.0;
  for (double v : a) total += v * v;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
    }
    if (off <= 1e-30 * std::max(total, 1e-300)) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double apq = a[p * n + q];
        if (apq == 0.0) continue;
        double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0);
        double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          double akp = a[k * n + p];
          double akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          double apk = a[p * n + k];
          double aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          double vkp = vectors[k * n + p];
          double vkq = vectors[k * n + q];
          vectors[k * n + p] = c * vkp - s * vkq;
          vectors[k * n + q] = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return a[x * n + x] > a[y * n + y]; });
  std::vector<double> values(n);
  std::vector<double> sorted(n * n);
  for (std::size_t j = 0; j < n; ++j) {
    values[j] = a[order[j] * n + order[j]];
    for (std::size_t i = 0; i < n; ++i) sorted[i * n + j] = vectors[i * n + order[j]];
  }
  vectors = std::move(sorted);
  return values;
}

PcaTransform fit_pca(std::span<const float> points, std::size_t n, std::size_t dim,
                     std::size_t output_dim, const PcaOptions& opts) {
  if (output_dim < 1 || output_dim > dim) throw InvalidArgument("fit_pca: need 1 <= d' <= d");
  if (n < 2) throw InvalidArgument("fit_pca: need at least two points");
  if (points.size() != n * dim) throw InvalidArgument("fit_pca: point block size mismatch");

  std::vector<double> mean(dim, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < dim; ++j) mean[j] += points[i * dim + j];
  }
  for (double& v : mean) v /= static_cast<double>(n);

  std::vector<double> cov(dim * dim, 0.0);
  std::vector<double> c(dim);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < dim; ++j) c[j] = points[i * dim + j] - mean[j];
    for (std::size_t a = 0; a < dim; ++a) {
      if (c[a] == 0.0) continue;
      double* row = &cov[a * dim];
      for (std::size_t b = a; b < dim; ++b) row[b] += c[a] * c[b];
    }
  }
  for (std::size_t a = 0; a < dim; ++a) {
    for (std::size_t b = a; b < dim; ++b) {
      cov[a * dim + b] /= static_cast<double>(n);
      cov[b * dim + a] = cov[a * dim + b];
    }
  }
  double trace = 0.0;
  for (std::size_t a = 0; a < dim; ++a) trace += cov[a * dim + a];
  if (!(trace > 1e-20)) throw InvalidArgument("fit_pca: degenerate covariance (all points identical)");

  const std::size_t k = output_dim;
  Rng rng(opts.seed);
  std::vector<double> q(dim * k);
  for (double& v : q) v = rng.normal();
  orthonormalize(q, dim, k, rng);

  std::vector<double> z(dim * k);
  for (int it = 0; it < opts.max_iterations; ++it) {
    std::fill(z.begin(), z.end(), 0.0);
    for (std::size_t a = 0; a < dim; ++a) {
      for (std::size_t b = 0; b < dim; ++b) {
        double cab = cov[a * dim + b];
        if (cab == 0.0) continue;
        for (std::size_t j = 0; j < k; ++j) z[a * k + j] += cab * q[b * k + j];
      }
    }
    orthonormalize(z, dim, k, rng);
    double change = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      double d = 0.0;
      for (std::size_t a = 0; a < dim; ++a) d += z[a * k + j] * q[a * k + j];
      change = std::max(change, 1.0 - std::abs(d));
    }
    q.swap(z);
    if (change < opts.tolerance) break;
  }

  // Rayleigh-Ritz: diagonalize Q^T C Q and rotate the basis accordingly.
  std::vector<double> cq(dim * k, 0.0);
  for (std::size_t a = 0; a < dim; ++a) {
    for (std::size_t b = 0; b < dim; ++b) {
      for (std::size_t j = 0; j < k; ++j) cq[a * k + j] += cov[a * dim + b] * q[b * k + j];
    }
  }
  std::vector<double> small(k * k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double s = 0.0;
      for (std::size_t a = 0; a < dim; ++a) s += q[a * k + i] * cq[a * k + j];
      small[i * k + j] = s;
    }
  }
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = i + 1; j < k; ++j) {
      double s = 0.5 * (small[i * k + j] + small[j * k + i]);
      small[i * k + j] = small[j * k + i] = s;
    }
  }
  std::vector<double> u;
  auto eig = symmetric_eigen(small, k, u);

  std::vector<double> components(k * dim, 0.0);
  for (std::size_t r = 0; r < k; ++r) {
    for (std::size_t a = 0; a < dim; ++a) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += q[a * k + j] * u[j * k + r];
      components[r * dim + a] = s;
    }
    // Deterministic sign: largest-magnitude coordinate positive.
    auto row = std::span(components).subspan(r * dim, dim);
    auto big = std::max_element(row.begin(), row.end(),
                                [](double x, double y) { return std::abs(x) < std::abs(y); });
    if (*big < 0) {
      for (double& v : row) v = -v;
    }
  }
  std::vector<double> explained(k);
  for (std::size_t r = 0; r < k; ++r) explained[r] = std::max(eig[r], 0.0) / trace;

  for (double& v : mean) v = static_cast<double>(static_cast<float>(v));
  for (double& v : components) v = static_cast<double>(static_cast<float>(v));
  return PcaTransform(dim, k, std::move(mean), std::move(components), std::move(explained));
}

PcaTransform fit_pca(const Datastore& ds, std::size_t output_dim, const PcaOptions& opts) {
  return fit_pca(ds.keys(), ds.size(), ds.dim(), output_dim, opts);
}

Datastore apply_pca(const Datastore& ds, const PcaTransform& pca) {
  if (pca.input_dim() != ds.dim()) {
    throw InvalidArgument("apply_pca: transform expects dim " + std::to_string(pca.input_dim()) +
                          ", datastore has " + std::to_string(ds.dim()));
  }
  std::vector<float> keys;
  keys.reserve(ds.size() * pca.output_dim());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto t = pca.apply(ds.key(i));
    keys.insert(keys.end(), t.begin(), t.end());
  }
  DatastoreMeta meta = ds.meta();
  nlohmann::json params{{"d_in", pca.input_dim()},
                        {"d_out", pca.output_dim()},
                        {"pca_fp", hex64(pca.fingerprint())}};
  if (!pca.explained_variance_ratio().empty()) params["explained_variance_ratio"] = pca.explained_variance_ratio();
  meta.transforms.push_back({"pca", params});
  std::vector<TokenId> values(ds.values().begin(), ds.values().end());
  std::vector<Provenance> prov(ds.provenance().begin(), ds.provenance().end());
  return Datastore(pca.output_dim(), std::move(keys), std::move(values), std::move(prov), std::move(meta));
}

nlohmann::json PruneReport::to_json() const {
  return {{"kept", kept}, {"dropped", dropped}, {"scale", scale}, {"method", {{"name", method}, {"params", params}}}};
}

namespace {

std::pair<Datastore, PruneReport> finish_prune(const Datastore& ds, std::vector<std::size_t> keep,
                                               std::string kind, nlohmann::json params) {
  PruneReport report;
  report.kept = keep.size();
  report.dropped = ds.size() - keep.size();
  report.scale = ds.empty() ? 1.0 : static_cast<double>(report.kept) / static_cast<double>(ds.size());
  report.method = kind;
  report.params = params;
  params["kept"] = report.kept;
  params["dropped"] = report.dropped;
  params["scale"] = report.scale;
  auto out = ds.subset(keep, {std::move(kind), std::move(params)});
  return {std::move(out), std::move(report)};
}

}  // namespace

double median_neighbor_distance(const Datastore& ds, std::size_t sample, std::uint64_t seed) {
  if (ds.size() < 2) throw InvalidArgument("median_neighbor_distance: need at least two entries");
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  rng.shuffle(idx);
  idx.resize(std::min(sample, idx.size()));
  std::vector<double> nn;
  nn.reserve(idx.size());
  for (std::size_t i : idx) {
    double best = INFINITY;
    for (std::size_t j = 0; j < ds.size(); ++j) {
      if (j != i) best = std::min(best, l2_square(ds.key(i), ds.key(j)));
    }
    nn.push_back(best);
  }
  auto mid = nn.begin() + static_cast<std::ptrdiff_t>(nn.size() / 2);
  std::nth_element(nn.begin(), mid, nn.end());
  return *mid;
}

std::pair<Datastore, PruneReport> prune_redundant(const Datastore& ds, const RedundancyOptions& opts) {
  if (opts.neighbors < 1) throw InvalidArgument("prune_redundant: k_p must be >= 1");
  const double theta = opts.threshold.has_value()
                           ? *opts.threshold
                           : (ds.size() >= 2 ? median_neighbor_distance(ds, opts.threshold_sample, opts.seed) : 0.0);
  if (!(theta >= 0.0)) throw InvalidArgument("prune_redundant: threshold must be >= 0");

  const std::size_t n = ds.size();
  const std::size_t kp = opts.neighbors;
  std::vector<char> removed(n, 0);
  std::vector<std::pair<double, std::size_t>> best;
  for (std::size_t i = 0; i < n; ++i) {
    best.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i || removed[j]) continue;
      std::pair<double, std::size_t> cand{l2_square(ds.key(i), ds.key(j)), j};
      if (best.size() < kp) {
        best.insert(std::upper_bound(best.begin(), best.end(), cand), cand);
      } else if (cand < best.back()) {
        best.pop_back();
        best.insert(std::upper_bound(best.begin(), best.end(), cand), cand);
      }
    }
    if (best.size() < kp || best.front().first > theta) continue;
    bool same = std::all_of(best.begin(), best.end(),
                            [&](const auto& b) { return ds.value(b.second) == ds.value(i); });
    if (same) removed[i] = 1;
  }
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < n; ++i) {
    if (!removed[i]) keep.push_back(i);
  }
  return finish_prune(ds, std::move(keep), "prune_redundant", {{"neighbors", kp}, {"threshold", theta}});
}

std::size_t token_rank(const Distribution& p, TokenId token) {
  const double pt = p[token];
  std::size_t rank = 0;
  for (TokenId v = 0; v < p.size(); ++v) {
    if (p[v] > pt || (p[v] == pt && v < token)) ++rank;
  }
  return rank;
}

std::pair<Datastore, PruneReport> prune_knowledge_margin(const Datastore& ds, const BaseModel& model,
                                                         const ParallelCorpus& corpus,
                                                         std::size_t rank) {
  ds.check_compatible(model);
  if (corpus.name() != ds.meta().corpus) {
    throw StaleArtifact("datastore was built from corpus '" + ds.meta().corpus + "', got '" +
                        corpus.name() + "'");
  }
  std::vector<std::size_t> keep;
  std::size_t cached_sentence = SIZE_MAX;
  std::vector<double> ctx;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto prov = ds.provenance()[i];
    if (prov.sentence >= corpus.size() || prov.position >= corpus[prov.sentence].target.size()) {
      throw StaleArtifact("provenance of entry " + std::to_string(i) + " is outside the corpus");
    }
    const auto& pair = corpus[prov.sentence];
    if (pair.target[prov.position] != ds.value(i)) {
      throw StaleArtifact("entry " + std::to_string(i) + " value disagrees with the corpus");
    }
    if (prov.sentence != cached_sentence) {
      ctx = model.source_context(pair.source);
      cached_sentence = prov.sentence;
    }
    bool known = false;
    if (rank > 0) {
      auto h = model.hidden_state(ctx, std::span(pair.target).first(prov.position));
      known = token_rank(model.output_distribution(h), ds.value(i)) < rank;
    }
    if (!known) keep.push_back(i);
  }
  return finish_prune(ds, std::move(keep), "prune_margin", {{"rank", rank}});
}

Datastore corrupt_values(const Datastore& ds, double fraction, std::size_t vocab_size,
                         std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) throw InvalidArgument("corruption fraction must be in [0, 1]");
  if (vocab_size < Vocab::kNumSpecial + 2) throw InvalidArgument("vocabulary too small to relabel");
  Rng rng(seed);
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  const auto count = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ds.size())));
  std::vector<TokenId> values(ds.values().begin(), ds.values().end());
  const std::size_t regular = vocab_size - Vocab::kNumSpecial;
  for (std::size_t i = 0; i < count; ++i) {
    TokenId& v = values[order[i]];
    TokenId next = v;
    while (next == v) next = static_cast<TokenId>(Vocab::kNumSpecial + rng.below(regular));
    v = next;
  }
  return ds.relabel(std::move(values),
                    {"relabel", {{"fraction", fraction}, {"seed", seed}, {"relabeled", count}}});
}

}  // namespace knnmt
