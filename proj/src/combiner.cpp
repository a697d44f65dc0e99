#include "knnmt/combiner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "knnmt/rng.hpp"

namespace knnmt {

std::string_view to_string(CombinerVariant v) {
  return v == CombinerVariant::kBasic ? "basic" : "adaptive";
}

CombinerVariant parse_variant(std::string_view s) {
  if (s == "basic") return CombinerVariant::kBasic;
  if (s == "adaptive") return CombinerVariant::kAdaptive;
  throw InvalidArgument("unknown combiner variant '" + std::string(s) + "'");
}

void CombinerConfig::validate() const {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw InvalidArgument("lambda must be in [0, 1], got " + std::to_string(lambda));
  }
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw InvalidArgument("temperature must be > 0, got " + std::to_string(temperature));
  }
  if (k == 0) throw InvalidArgument("k must be >= 1");
}

Distribution knn_distribution(const NeighborSet& neighbors, double temperature,
                              std::size_t vocab_size) {
  if (!(temperature > 0.0)) throw InvalidArgument("knn_distribution: temperature must be > 0");
  if (neighbors.empty()) {
    throw InvalidArgument("knn_distribution: no neighbors (use lambda = 0 to skip retrieval)");
  }
  // Scores are -d/T; subtract the max before exponentiating.
  double best = -INFINITY;
  for (const auto& n : neighbors.items) best = std::max(best, -n.distance / temperature);
  std::vector<double> p(vocab_size, 0.0);
  double z = 0.0;
  for (const auto& n : neighbors.items) {
    if (n.value >= vocab_size) throw InvalidArgument("knn_distribution: neighbor value out of vocabulary");
    double s = std::exp(-n.distance / temperature - best);
    p[n.value] += s;
    z += s;
  }
  for (double& v : p) v /= z;
  return Distribution(std::move(p));
}

Distribution interpolate(const Distribution& p_knn, const Distribution& p_nmt, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidArgument("interpolate: lambda outside [0, 1]");
  if (p_knn.size() != p_nmt.size()) throw InvalidArgument("interpolate: vocabulary size mismatch");
  if (lambda == 0.0) return p_nmt;
  if (lambda == 1.0) return p_knn;
  std::vector<double> p(p_nmt.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = lambda * p_knn[static_cast<TokenId>(i)] + (1.0 - lambda) * p_nmt[static_cast<TokenId>(i)];
  }
  return Distribution(std::move(p));
}

MetaNet::MetaNet(std::size_t k, std::size_t hidden) : k_(k), hidden_(hidden) {
  if (k_ == 0) throw InvalidArgument("meta network needs k >= 1");
  if (hidden_ == 0) throw InvalidArgument("meta network needs a hidden layer");
  w_.w1.assign(hidden_ * num_features(), 0.0);
  w_.b1.assign(hidden_, 0.0);
  w_.w2.assign(num_options() * hidden_, 0.0);
  w_.b2.assign(num_options(), 0.0);
}

MetaNet MetaNet::initialize(std::size_t k, std::size_t hidden, std::uint64_t seed) {
  MetaNet net(k, hidden);
  Rng rng(seed);
  double s1 = std::sqrt(3.0 / static_cast<double>(net.num_features()));
  double s2 = std::sqrt(3.0 / static_cast<double>(hidden));
  for (double& v : net.w_.w1) v = rng.uniform(-s1, s1);
  for (double& v : net.w_.w2) v = rng.uniform(-s2, s2);
  net.round_to_float();
  return net;
}

std::vector<double> MetaNet::features(const NeighborSet& neighbors) const {
  if (neighbors.size() != k_) {
    throw InvalidArgument("meta network expects " + std::to_string(k_) + " neighbors, got " +
                          std::to_string(neighbors.size()));
  }
  std::vector<double> f(num_features());
  std::set<TokenId> seen;
  for (std::size_t j = 0; j < k_; ++j) {
    f[j] = neighbors[j].distance;
    seen.insert(neighbors[j].value);
    f[k_ + j] = static_cast<double>(seen.size());
  }
  return f;
}

Distribution MetaNet::option_weights(std::span<const double> features) const {
  if (features.size() != num_features()) throw InvalidArgument("meta network feature width mismatch");
  const std::size_t F = num_features();
  std::vector<double> h(hidden_);
  for (std::size_t r = 0; r < hidden_; ++r) {
    double acc = w_.b1[r];
    for (std::size_t c = 0; c < F; ++c) acc += w_.w1[r * F + c] * features[c];
    h[r] = std::tanh(acc);
  }
  std::vector<double> logits(num_options());
  for (std::size_t o = 0; o < num_options(); ++o) {
    double acc = w_.b2[o];
    for (std::size_t c = 0; c < hidden_; ++c) acc += w_.w2[o * hidden_ + c] * h[c];
    logits[o] = acc;
  }
  return Distribution::softmax(logits);
}

void MetaNet::round_to_float() {
  for (auto* t : w_.tensors()) {
    for (double& v : *t) v = static_cast<double>(static_cast<float>(v));
  }
}

std::vector<std::byte> MetaNet::serialize() const {
  ByteWriter w;
  w.magic(kMetaNetMagic);
  w.u32(static_cast<std::uint32_t>(k_));
  w.u32(kFeatureLayout);
  w.u32(static_cast<std::uint32_t>(hidden_));
  for (const auto* t : w_.tensors()) w.f32s_from(*t);
  return w.data();
}

MetaNet MetaNet::deserialize(std::span<const std::byte> bytes) {
  ByteReader r(bytes, "meta network checkpoint");
  r.expect_magic(kMetaNetMagic);
  std::size_t k = r.u32();
  std::uint32_t layout = r.u32();
  std::size_t hidden = r.u32();
  if (layout != kFeatureLayout) {
    throw FormatError("meta network feature layout " + std::to_string(layout) + " unsupported");
  }
  if (k == 0 || hidden == 0) throw FormatError("meta network checkpoint: bad header");
  MetaNet net(k, hidden);
  for (auto* t : net.w_.tensors()) *t = r.f32s_as_double(t->size());
  r.expect_end();
  return net;
}

void MetaNet::save(const std::filesystem::path& path) const { write_file(path, serialize()); }
MetaNet MetaNet::load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

Distribution adaptive_combine(const MetaNet& net, const NeighborSet& neighbors,
                              const Distribution& p_nmt, double temperature) {
  auto w = net.option_weights(neighbors);
  const std::size_t V = p_nmt.size();
  std::vector<double> p(V);
  for (std::size_t i = 0; i < V; ++i) p[i] = w[0] * p_nmt[static_cast<TokenId>(i)];
  for (std::size_t opt = 1; opt <= net.k(); ++opt) {
    if (w[static_cast<TokenId>(opt)] == 0.0) continue;
    auto knn = knn_distribution(neighbors.prefix(opt), temperature, V);
    for (std::size_t i = 0; i < V; ++i) p[i] += w[static_cast<TokenId>(opt)] * knn[static_cast<TokenId>(i)];
  }
  return Distribution(std::move(p));
}

MetaNetExample make_metanet_example(const MetaNet& net, const NeighborSet& neighbors,
                                    const Distribution& p_nmt, TokenId gold, double temperature) {
  MetaNetExample ex;
  ex.features = net.features(neighbors);
  ex.option_gold_prob.resize(net.num_options());
  ex.option_gold_prob[0] = p_nmt[gold];
  // Prefix sums of the similarity mass, max-subtracted against the nearest neighbor.
  const double top = -neighbors[0].distance / temperature;
  double z = 0.0;
  double gold_mass = 0.0;
  for (std::size_t j = 0; j < net.k(); ++j) {
    double s = std::exp(-neighbors[j].distance / temperature - top);
    z += s;
    if (neighbors[j].value == gold) gold_mass += s;
    ex.option_gold_prob[j + 1] = gold_mass / z;
  }
  return ex;
}

double metanet_loss_and_gradient(const MetaNet& net, std::span<const MetaNetExample> examples,
                                 MetaNetWeights& grad) {
  if (examples.empty()) throw InvalidArgument("meta network loss over no examples");
  const auto& w = net.weights();
  const std::size_t F = net.num_features();
  const std::size_t H = net.hidden();
  const std::size_t O = net.num_options();
  grad.w1.assign(w.w1.size(), 0.0);
  grad.b1.assign(w.b1.size(), 0.0);
  grad.w2.assign(w.w2.size(), 0.0);
  grad.b2.assign(w.b2.size(), 0.0);
  const double scale = 1.0 / static_cast<double>(examples.size());

  std::vector<double> h(H), logits(O), dlogit(O), dh(H);
  double loss = 0.0;
  for (const auto& ex : examples) {
    for (std::size_t r = 0; r < H; ++r) {
      double acc = w.b1[r];
      for (std::size_t c = 0; c < F; ++c) acc += w.w1[r * F + c] * ex.features[c];
      h[r] = std::tanh(acc);
    }
    double mx = -INFINITY;
    for (std::size_t o = 0; o < O; ++o) {
      double acc = w.b2[o];
      for (std::size_t c = 0; c < H; ++c) acc += w.w2[o * H + c] * h[c];
      logits[o] = acc;
      mx = std::max(mx, acc);
    }
    double z = 0.0;
    for (double& v : logits) {
      v = std::exp(v - mx);
      z += v;
    }
    double p = 0.0;
    for (std::size_t o = 0; o < O; ++o) {
      logits[o] /= z;  // option weights
      p += logits[o] * ex.option_gold_prob[o];
    }
    loss -= std::log(p);
    // dL/dlogit_o = w_o * (1 - a_o / p)
    for (std::size_t o = 0; o < O; ++o) dlogit[o] = logits[o] * (1.0 - ex.option_gold_prob[o] / p) * scale;
    std::fill(dh.begin(), dh.end(), 0.0);
    for (std::size_t o = 0; o < O; ++o) {
      grad.b2[o] += dlogit[o];
      for (std::size_t c = 0; c < H; ++c) {
        grad.w2[o * H + c] += dlogit[o] * h[c];
        dh[c] += dlogit[o] * w.w2[o * H + c];
      }
    }
    for (std::size_t r = 0; r < H; ++r) {
      double da = dh[r] * (1.0 - h[r] * h[r]);
      grad.b1[r] += da;
      for (std::size_t c = 0; c < F; ++c) grad.w1[r * F + c] += da * ex.features[c];
    }
  }
  return loss * scale;
}

namespace {

double mean_loss(const MetaNet& net, std::span<const MetaNetExample> examples) {
  MetaNetWeights scratch;
  return metanet_loss_and_gradient(net, examples, scratch);
}

}  // namespace

MetaNetTrainReport train_metanet(MetaNet& net, std::span<const MetaNetExample> examples,
                                 const MetaNetTrainOptions& opts) {
  if (examples.empty()) throw InvalidArgument("train_metanet: no training examples");
  if (opts.batch == 0) throw InvalidArgument("train_metanet: batch size must be >= 1");
  if (!(opts.lr >= 0.0)) throw InvalidArgument("train_metanet: learning rate must be >= 0");
  MetaNetTrainReport report;
  report.examples = examples.size();
  report.initial_loss = mean_loss(net, examples);
  if (!std::isfinite(report.initial_loss)) throw Error("train_metanet: non-finite initial loss");

  Rng rng(opts.seed);
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<MetaNetExample> batch;
  MetaNetWeights grad;
  // Adam moments, one per weight tensor.
  auto wt = net.weights().tensors();
  std::array<std::vector<double>, 4> m1, m2;
  for (std::size_t t = 0; t < wt.size(); ++t) {
    m1[t].assign(wt[t]->size(), 0.0);
    m2[t].assign(wt[t]->size(), 0.0);
  }
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  long long steps = 0;
  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t b = 0; b < order.size(); b += opts.batch) {
      batch.clear();
      for (std::size_t i = b; i < std::min(order.size(), b + opts.batch); ++i) {
        batch.push_back(examples[order[i]]);
      }
      double loss = metanet_loss_and_gradient(net, batch, grad);
      if (!std::isfinite(loss)) throw Error("train_metanet: non-finite loss at epoch " + std::to_string(epoch));
      ++steps;
      const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(steps));
      const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(steps));
      auto gt = grad.tensors();
      for (std::size_t t = 0; t < wt.size(); ++t) {
        for (std::size_t j = 0; j < wt[t]->size(); ++j) {
          const double g = (*gt[t])[j];
          m1[t][j] = kBeta1 * m1[t][j] + (1.0 - kBeta1) * g;
          m2[t][j] = kBeta2 * m2[t][j] + (1.0 - kBeta2) * g * g;
          (*wt[t])[j] -= opts.lr * (m1[t][j] / c1) / (std::sqrt(m2[t][j] / c2) + kEps);
        }
      }
    }
  }
  net.round_to_float();
  report.final_loss = mean_loss(net, examples);
  return report;
}

MetaNetTrainReport train_metanet(MetaNet& net, const BaseModel& model, const Retriever& retriever,
                                 const ParallelCorpus& heldout, const MetaNetTrainOptions& opts) {
  if (heldout.empty()) throw InvalidArgument("train_metanet: empty held-out corpus");
  std::vector<MetaNetExample> examples;
  for (const auto& pair : heldout.pairs()) {
    auto ctx = model.source_context(pair.source);
    for (std::size_t t = 0; t < pair.target.size(); ++t) {
      auto h = model.hidden_state(ctx, std::span(pair.target).first(t));
      auto p_nmt = model.output_distribution(h);
      auto neighbors = retriever.search_hidden(h, net.k());
      examples.push_back(make_metanet_example(net, neighbors, p_nmt, pair.target[t], opts.temperature));
    }
  }
  return train_metanet(net, examples, opts);
}

}  // namespace knnmt
