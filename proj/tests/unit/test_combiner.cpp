#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "fixtures.hpp"
#include "knnmt/combiner.hpp"
#include "knnmt/rng.hpp"

using namespace knnmt;
using knnmt::testing::TempDir;

namespace {

NeighborSet make_neighbors(std::vector<double> distances, std::vector<TokenId> values) {
  NeighborSet s;
  for (std::size_t i = 0; i < distances.size(); ++i) {
    Neighbor n;
    n.index = i;
    n.distance = distances[i];
    n.value = values[i];
    s.items.push_back(n);
  }
  return s;
}

NeighborSet random_neighbors(Rng& rng, std::size_t k, std::size_t vocab) {
  std::vector<double> d(k);
  std::vector<TokenId> v(k);
  for (auto& x : d) x = rng.uniform(0.0, 30.0);
  std::sort(d.begin(), d.end());
  for (auto& t : v) t = static_cast<TokenId>(rng.below(vocab));
  return make_neighbors(d, v);
}

Distribution random_distribution(Rng& rng, std::size_t n) {
  std::vector<double> logits(n);
  for (auto& l : logits) l = 2.0 * rng.normal();
  return Distribution::softmax(logits);
}

// Extended-precision exponentiate, scatter, normalize.
std::vector<long double> knn_oracle(const std::vector<double>& d, const std::vector<TokenId>& v,
                                    long double T, std::size_t V) {
  std::vector<long double> p(V, 0.0L);
  long double z = 0.0L;
  for (std::size_t j = 0; j < d.size(); ++j) {
    long double s = std::exp(-static_cast<long double>(d[j]) / T);
    p[v[j]] += s;
    z += s;
  }
  for (auto& x : p) x /= z;
  return p;
}

void expect_same(const Distribution& a, const Distribution& b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_NEAR(a[static_cast<TokenId>(i)], b[static_cast<TokenId>(i)], tol) << "token " << i;
}

MetaNet forced_net(std::size_t k, std::size_t option) {
  MetaNet net(k, 4);
  net.weights().b2[option] = 1000.0;
  return net;
}

}  // namespace

TEST(KnnDistribution, SingleNeighborIsOneHot) {
  auto p = knn_distribution(make_neighbors({3.0}, {7}), 10.0, 12);
  for (TokenId t = 0; t < 12; ++t) EXPECT_EQ(p[t], t == 7 ? 1.0 : 0.0);
}

TEST(KnnDistribution, EqualDistancesSplitEvenly) {
  auto p = knn_distribution(make_neighbors({2.0, 2.0}, {3, 9}), 10.0, 12);
  EXPECT_DOUBLE_EQ(p[3], 0.5);
  EXPECT_DOUBLE_EQ(p[9], 0.5);
  EXPECT_EQ(p[4], 0.0);
}

TEST(KnnDistribution, MatchesExtendedPrecisionOracle) {
  std::vector<double> d{0, 1, 4, 9};
  std::vector<TokenId> v{5, 5, 2, 5};
  auto p = knn_distribution(make_neighbors(d, v), 10.0, 8);
  auto oracle = knn_oracle(d, v, 10.0L, 8);
  for (TokenId t = 0; t < 8; ++t) EXPECT_NEAR(p[t], static_cast<double>(oracle[t]), 1e-15);

  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    auto n = random_neighbors(rng, 1 + rng.below(16), 20);
    double T = std::exp(rng.uniform(-2.0, 5.0));
    std::vector<double> dd;
    std::vector<TokenId> vv;
    for (const auto& x : n.items) {
      dd.push_back(x.distance);
      vv.push_back(x.value);
    }
    auto got = knn_distribution(n, T, 20);
    auto want = knn_oracle(dd, vv, T, 20);
    for (TokenId t = 0; t < 20; ++t) EXPECT_NEAR(got[t], static_cast<double>(want[t]), 1e-12);
  }
}

TEST(KnnDistribution, StableAtTinyTemperature) {
  auto p = knn_distribution(make_neighbors({500.0, 501.0}, {4, 6}), 0.01, 8);
  EXPECT_DOUBLE_EQ(p[4], 1.0);
  EXPECT_NEAR(p[6], std::exp(-100.0), 1e-50);
}

TEST(KnnDistribution, InvariantToShiftAndOrder) {
  Rng rng(9);
  for (int trial = 0; trial < 100; ++trial) {
    auto n = random_neighbors(rng, 8, 15);
    auto base = knn_distribution(n, 10.0, 15);
    auto shifted = n;
    double c = rng.uniform(0.0, 100.0);
    for (auto& x : shifted.items) x.distance += c;
    expect_same(knn_distribution(shifted, 10.0, 15), base, 1e-9);
    auto shuffled = n;
    rng.shuffle(shuffled.items);
    expect_same(knn_distribution(shuffled, 10.0, 15), base, 1e-12);
  }
}

TEST(KnnDistribution, Errors) {
  auto n = make_neighbors({1.0}, {4});
  EXPECT_THROW(knn_distribution(n, 0.0, 8), InvalidArgument);
  EXPECT_THROW(knn_distribution(n, -1.0, 8), InvalidArgument);
  EXPECT_THROW(knn_distribution(NeighborSet{}, 1.0, 8), InvalidArgument);
  EXPECT_THROW(knn_distribution(n, 1.0, 3), InvalidArgument);
}

TEST(Interpolate, EndpointsAndOracle) {
  Rng rng(4);
  auto a = random_distribution(rng, 30);
  auto b = random_distribution(rng, 30);
  auto at0 = interpolate(a, b, 0.0);
  auto at1 = interpolate(a, b, 1.0);
  for (TokenId t = 0; t < 30; ++t) {
    EXPECT_EQ(at0[t], b[t]);
    EXPECT_EQ(at1[t], a[t]);
  }
  EXPECT_EQ(at0.argmax(), b.argmax());
  EXPECT_EQ(at1.argmax(), a.argmax());
  auto mix = interpolate(a, b, 0.7);
  for (TokenId t = 0; t < 30; ++t) EXPECT_NEAR(mix[t], 0.7 * a[t] + 0.3 * b[t], 1e-9);
}

TEST(Interpolate, SameDistributionIsFixedPoint) {
  Rng rng(5);
  auto p = random_distribution(rng, 25);
  for (double lambda : {0.0, 0.13, 0.5, 0.99, 1.0}) expect_same(interpolate(p, p, lambda), p, 1e-15);
}

TEST(Interpolate, Errors) {
  auto a = Distribution::uniform(4);
  EXPECT_THROW(interpolate(a, a, -0.1), InvalidArgument);
  EXPECT_THROW(interpolate(a, a, 1.5), InvalidArgument);
  EXPECT_THROW(interpolate(a, Distribution::uniform(5), 0.5), InvalidArgument);
}

TEST(CombinerConfig, Validates) {
  EXPECT_NO_THROW(CombinerConfig{}.validate());
  EXPECT_THROW((CombinerConfig{1.2, 10.0, 8, CombinerVariant::kBasic}).validate(), InvalidArgument);
  EXPECT_THROW((CombinerConfig{0.5, 0.0, 8, CombinerVariant::kBasic}).validate(), InvalidArgument);
  EXPECT_THROW((CombinerConfig{0.5, 10.0, 0, CombinerVariant::kBasic}).validate(), InvalidArgument);
  EXPECT_EQ(parse_variant("adaptive"), CombinerVariant::kAdaptive);
  EXPECT_EQ(to_string(CombinerVariant::kBasic), "basic");
  EXPECT_THROW(parse_variant("robust"), InvalidArgument);
}

TEST(MetaNet, FeaturesAreDistancesThenDistinctCounts) {
  MetaNet net(4);
  auto f = net.features(make_neighbors({0.5, 1.0, 2.0, 3.0}, {5, 5, 7, 5}));
  EXPECT_EQ(f, (std::vector<double>{0.5, 1.0, 2.0, 3.0, 1, 1, 2, 2}));
  EXPECT_THROW(net.features(make_neighbors({1.0}, {5})), InvalidArgument);
  EXPECT_THROW(net.option_weights(std::vector<double>(3)), InvalidArgument);
}

TEST(AdaptiveCombine, OneHotOptionsReduceToComponents) {
  Rng rng(6);
  auto n = random_neighbors(rng, 4, 12);
  auto p_nmt = random_distribution(rng, 12);
  expect_same(adaptive_combine(forced_net(4, 0), n, p_nmt, 10.0), p_nmt, 1e-15);
  expect_same(adaptive_combine(forced_net(4, 4), n, p_nmt, 10.0), knn_distribution(n, 10.0, 12), 1e-15);
  expect_same(adaptive_combine(forced_net(4, 2), n, p_nmt, 10.0),
              knn_distribution(n.prefix(2), 10.0, 12), 1e-15);
}

TEST(AdaptiveCombine, MatchesMixtureOracleAndStaysInHull) {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    auto net = MetaNet::initialize(4, 8, 100 + trial);
    for (double& b : net.weights().b2) b = rng.normal();
    auto n = random_neighbors(rng, 4, 10);
    auto p_nmt = random_distribution(rng, 10);
    auto w = net.option_weights(n);
    std::vector<Distribution> comps{p_nmt};
    for (std::size_t i = 1; i <= 4; ++i) comps.push_back(knn_distribution(n.prefix(i), 10.0, 10));
    auto got = adaptive_combine(net, n, p_nmt, 10.0);
    double total = 0.0;
    for (TokenId t = 0; t < 10; ++t) {
      double want = 0.0, lo = 1.0, hi = 0.0;
      for (std::size_t o = 0; o < comps.size(); ++o) {
        want += w[static_cast<TokenId>(o)] * comps[o][t];
        lo = std::min(lo, comps[o][t]);
        hi = std::max(hi, comps[o][t]);
      }
      EXPECT_NEAR(got[t], want, 1e-12);
      EXPECT_GE(got[t], lo - 1e-12);
      EXPECT_LE(got[t], hi + 1e-12);
      total += got[t];
    }
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
}

TEST(AdaptiveCombine, WidthMismatchIsAnError) {
  Rng rng(1);
  auto n = random_neighbors(rng, 3, 10);
  EXPECT_THROW(adaptive_combine(MetaNet(4), n, Distribution::uniform(10), 10.0), InvalidArgument);
}

TEST(MetaNetTraining, GradientMatchesCentralDifferences) {
  Rng rng(11);
  auto net = MetaNet::initialize(4, 6, 3);
  for (double& b : net.weights().b1) b = 0.1 * rng.normal();
  for (double& b : net.weights().b2) b = 0.1 * rng.normal();
  std::vector<MetaNetExample> batch;
  for (int i = 0; i < 5; ++i) {
    auto n = random_neighbors(rng, 4, 9);
    auto p = random_distribution(rng, 9);
    batch.push_back(make_metanet_example(net, n, p, n[0].value, 10.0));
  }
  // Distances up to 30 saturate tanh; scale features to keep the check informative.
  for (auto& ex : batch)
    for (std::size_t j = 0; j < 4; ++j) ex.features[j] /= 10.0;

  MetaNetWeights grad;
  metanet_loss_and_gradient(net, batch, grad);
  const double eps = 1e-5;
  auto params = net.weights().tensors();
  auto grads = grad.tensors();
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (std::size_t i = 0; i < params[t]->size(); ++i) {
      double& w = (*params[t])[i];
      const double orig = w;
      MetaNetWeights scratch;
      w = orig + eps;
      const double up = metanet_loss_and_gradient(net, batch, scratch);
      w = orig - eps;
      const double down = metanet_loss_and_gradient(net, batch, scratch);
      w = orig;
      const double numeric = (up - down) / (2 * eps);
      const double analytic = (*grads[t])[i];
      const double scale = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      EXPECT_LT(std::abs(numeric - analytic) / scale, 1e-4) << "tensor " << t << "[" << i << "]";
    }
  }
}

TEST(MetaNetTraining, ExampleHoldsGoldProbabilityPerOption) {
  auto n = make_neighbors({0.0, 1.0}, {5, 6});
  auto p = Distribution({0.0, 0.0, 0.0, 0.0, 0.0, 0.25, 0.75});
  auto ex = make_metanet_example(MetaNet(2), n, p, 6, 10.0);
  ASSERT_EQ(ex.option_gold_prob.size(), 3u);
  EXPECT_DOUBLE_EQ(ex.option_gold_prob[0], 0.75);
  EXPECT_DOUBLE_EQ(ex.option_gold_prob[1], 0.0);
  EXPECT_NEAR(ex.option_gold_prob[2], std::exp(-0.1) / (1 + std::exp(-0.1)), 1e-15);
}

namespace {

std::vector<MetaNetExample> synthetic_examples(std::size_t count, std::uint64_t seed) {
  // Close neighbors carry the gold token, far ones do not.
  Rng rng(seed);
  std::vector<MetaNetExample> out;
  MetaNet shape(4);
  for (std::size_t i = 0; i < count; ++i) {
    bool close = rng.uniform() < 0.5;
    TokenId gold = 4 + static_cast<TokenId>(rng.below(6));
    std::vector<double> d(4);
    std::vector<TokenId> v(4);
    for (std::size_t j = 0; j < 4; ++j) {
      d[j] = (close ? 1.0 : 20.0) + j;
      v[j] = close ? gold : static_cast<TokenId>(4 + rng.below(6));
    }
    auto p = random_distribution(rng, 10);
    out.push_back(make_metanet_example(shape, make_neighbors(d, v), p, gold, 10.0));
  }
  return out;
}

}  // namespace

TEST(MetaNetTraining, ZeroLearningRateLeavesWeightsUnchanged) {
  auto ex = synthetic_examples(40, 1);
  auto net = MetaNet::initialize(4, 8, 2);
  auto before = net.weights();
  MetaNetTrainOptions opts;
  opts.lr = 0.0;
  opts.epochs = 5;
  auto report = train_metanet(net, ex, opts);
  auto a = before.tensors();
  auto b = net.weights().tensors();
  for (std::size_t t = 0; t < a.size(); ++t) EXPECT_EQ(*a[t], *b[t]);
  EXPECT_DOUBLE_EQ(report.initial_loss, report.final_loss);
}

TEST(MetaNetTraining, LossDecreasesAndIsDeterministic) {
  auto ex = synthetic_examples(200, 3);
  auto a = MetaNet::initialize(4, 8, 2);
  auto b = a;
  MetaNetTrainOptions opts;
  opts.epochs = 30;
  auto ra = train_metanet(a, ex, opts);
  auto rb = train_metanet(b, ex, opts);
  EXPECT_LT(ra.final_loss, ra.initial_loss);
  EXPECT_EQ(ra.final_loss, rb.final_loss);
  EXPECT_EQ(a.serialize(), b.serialize());
}

TEST(MetaNetTraining, RejectsNonFiniteLoss) {
  auto ex = synthetic_examples(10, 3);
  ex[3].features[0] = NAN;
  auto net = MetaNet::initialize(4, 8, 2);
  EXPECT_THROW(train_metanet(net, ex, {}), Error);
  EXPECT_THROW(train_metanet(net, std::vector<MetaNetExample>{}, {}), InvalidArgument);
}

TEST(MetaNetTraining, CheckpointRoundTrip) {
  TempDir dir;
  auto net = MetaNet::initialize(8, 32, 5);
  net.save(dir / "m.bin");
  auto back = MetaNet::load(dir / "m.bin");
  EXPECT_EQ(back.k(), 8u);
  EXPECT_EQ(back.hidden(), 32u);
  EXPECT_EQ(back.serialize(), net.serialize());
  auto bytes = net.serialize();
  EXPECT_EQ(std::string(reinterpret_cast<const char*>(bytes.data()), 8), "KNNBX00M");
  EXPECT_THROW(MetaNet::deserialize(std::span(bytes).first(bytes.size() - 1)), FormatError);
  EXPECT_THROW(MetaNet::deserialize(std::span(bytes).first(10)), FormatError);
}

TEST(MetaNetTraining, TrainsFromHeldoutCorpus) {
  const auto& f = knnmt::testing::toy_fixture();
  Retriever r(*f.store);
  auto net = MetaNet::initialize(8, 32, 1);
  MetaNetTrainOptions opts;
  opts.epochs = 5;
  auto report = train_metanet(net, *f.model, r, f.heldout, opts);
  EXPECT_EQ(report.examples, f.heldout.target_token_count());
  EXPECT_LT(report.final_loss, report.initial_loss);
}
