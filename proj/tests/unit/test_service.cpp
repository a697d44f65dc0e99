#include <gtest/gtest.h>

#include <cmath>
#include <thread>

#include "fixtures.hpp"
#include "httplib.h"
#include "knnmt/compression.hpp"
#include "knnmt/trace_service.hpp"

namespace knnmt {
namespace {

using nlohmann::json;
using testing::toy_fixture;

Pipeline toy_pipeline(CombinerConfig cfg = {}) {
  const auto& f = toy_fixture();
  return Pipeline(f.model, f.store, cfg);
}

// Service bound to an ephemeral localhost port for the lifetime of the object.
class LiveService {
 public:
  template <typename... Args>
  explicit LiveService(Args&&... args) : service_(std::forward<Args>(args)...) {
    service_.install(server_);
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~LiveService() {
    server_.stop();
    thread_.join();
  }

  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port_);
    c.set_read_timeout(60, 0);
    return c;
  }

  httplib::Result post(const json& body) const {
    return client().Post("/api/translate", body.dump(), "application/json");
  }

  httplib::Result get(const std::string& path) const { return client().Get(path); }

 private:
  TraceService service_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

const LiveService& shared_service() {
  static LiveService svc(toy_pipeline(), toy_fixture().datastore_corpus);
  return svc;
}

std::string toy_source(std::size_t i) { return toy_fixture().raw.test.at(i).first; }

TEST(Service, MalformedJsonIs400) {
  auto res = shared_service().client().Post("/api/translate", "{not json", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  EXPECT_TRUE(json::parse(res->body).contains("error"));
}

TEST(Service, InvalidOverridesAre400) {
  const auto text = toy_source(0);
  for (const json& ov : {json{{"lambda", 1.5}}, json{{"lambda", -0.1}}, json{{"temperature", 0}},
                         json{{"temperature", "hot"}}, json{{"k", 0}}, json{{"k", 100000}},
                         json{{"variant", "fancy"}}, json{{"beam", 0}}, json{{"mystery", 1}}}) {
    auto res = shared_service().post({{"text", text}, {"overrides", ov}});
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 400) << ov.dump();
  }
  auto res = shared_service().post({{"text", text}, {"extra", 1}});
  EXPECT_EQ(res->status, 400);
  res = shared_service().post(json::array({1, 2}));
  EXPECT_EQ(res->status, 400);
}

TEST(Service, EmptyInputIs422) {
  for (const char* text : {"", "   "}) {
    auto res = shared_service().post({{"text", text}});
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 422);
  }
}

TEST(Service, UnknownRouteIs404WithJsonBody) {
  auto res = shared_service().get("/api/nothing");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 404);
  EXPECT_TRUE(json::parse(res->body).contains("error"));
}

TEST(Service, LambdaZeroFinalEqualsBase) {
  auto res = shared_service().post({{"text", toy_source(1)}, {"overrides", {{"lambda", 0.0}}}});
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200);
  auto body = json::parse(res->body);
  ASSERT_FALSE(body["traces"].empty());
  for (const auto& t : body["traces"]) {
    const auto& nmt = t["p_nmt"]["top"];
    const auto& fin = t["p_final"]["top"];
    ASSERT_EQ(nmt.size(), fin.size());
    for (std::size_t i = 0; i < nmt.size(); ++i) {
      EXPECT_EQ(nmt[i]["id"], fin[i]["id"]);
      EXPECT_NEAR(nmt[i]["prob"].get<double>(), fin[i]["prob"].get<double>(), 1e-12);
    }
  }
  auto base = toy_pipeline({0.0}).generate(toy_fixture().vocab.encode(toy_source(1)), 1, 32);
  EXPECT_EQ(body["token_ids"].get<std::vector<TokenId>>(), base.tokens);
}

TEST(Service, OverridesAreEchoedAndApplied) {
  auto res = shared_service().post(
      {{"text", toy_source(2)}, {"overrides", {{"lambda", 0.9}, {"temperature", 5.0}, {"k", 4}}}});
  ASSERT_EQ(res->status, 200);
  auto body = json::parse(res->body);
  EXPECT_DOUBLE_EQ(body["config"]["lambda"].get<double>(), 0.9);
  EXPECT_DOUBLE_EQ(body["config"]["temperature"].get<double>(), 5.0);
  EXPECT_EQ(body["config"]["k"], 4);
  for (const auto& t : body["traces"]) EXPECT_EQ(t["neighbors"].size(), 4u);
  auto direct = toy_pipeline({0.9, 5.0, 4}).generate(toy_fixture().vocab.encode(toy_source(2)), 1, 32);
  EXPECT_EQ(body["token_ids"].get<std::vector<TokenId>>(), direct.tokens);
}

TEST(Service, OutOfVocabularyMapsToUnk) {
  auto res = shared_service().post({{"text", "the zzqx doctor"}});
  ASSERT_EQ(res->status, 200);
  auto body = json::parse(res->body);
  EXPECT_EQ(body["source_tokens"][1], "<unk>");
}

TEST(Service, ConfigReportsDatastoreStats) {
  auto res = shared_service().get("/api/config");
  ASSERT_EQ(res->status, 200);
  auto body = json::parse(res->body);
  const auto& f = toy_fixture();
  EXPECT_EQ(body["datastore"]["n"], f.store->size());
  EXPECT_EQ(body["datastore"]["dim"], f.store->dim());
  EXPECT_DOUBLE_EQ(body["datastore"]["scale"].get<double>(), 1.0);
  EXPECT_TRUE(body["datastore"]["transforms"].empty());
  EXPECT_EQ(body["lambda"], 0.5);
}

TEST(Service, ConfigPassesThroughPruneScaleAndChain) {
  const auto& f = toy_fixture();
  auto pca = std::make_shared<const PcaTransform>(fit_pca(*f.store, 32));
  auto reduced = apply_pca(*f.store, *pca);
  auto [pruned, report] = prune_knowledge_margin(reduced, *f.model, f.datastore_corpus, 1);
  const std::size_t n = pruned.size();
  auto store = std::make_shared<const Datastore>(std::move(pruned));
  TraceService svc(Pipeline(f.model, store, {}, nullptr, pca), std::nullopt);
  auto cfg = svc.config();
  EXPECT_DOUBLE_EQ(cfg["datastore"]["scale"].get<double>(), report.scale);
  EXPECT_EQ(cfg["datastore"]["n"], n);
  EXPECT_EQ(cfg["datastore"]["n"], store->meta_json()["n"]);
  EXPECT_EQ(cfg["datastore"]["transforms"], json::array({"pca", "prune_margin"}));
  EXPECT_EQ(cfg["pca"]["output_dim"], 32);

  auto out = svc.translate(json{{"text", toy_source(3)}});
  EXPECT_FALSE(out["tokens"].empty());
}

TEST(Service, NeighborDetailMatchesTrace) {
  const auto& svc = shared_service();
  auto res = svc.post({{"text", toy_source(4)}});
  ASSERT_EQ(res->status, 200);
  auto body = json::parse(res->body);
  const std::string session = body["session"];
  const auto& f = toy_fixture();
  for (std::size_t step = 0; step < body["traces"].size(); ++step) {
    const auto& nbs = body["traces"][step]["neighbors"];
    const std::size_t k = nbs.size();
    ASSERT_EQ(k, 8u);
    auto first = svc.get("/api/neighbor/" + std::to_string(step) + "/0?session=" + session);
    ASSERT_EQ(first->status, 200);
    auto d0 = json::parse(first->body);
    double min_dist = INFINITY;
    for (const auto& n : nbs) min_dist = std::min(min_dist, n["distance"].get<double>());
    EXPECT_EQ(d0["distance"].get<double>(), min_dist);

    for (std::size_t r = 0; r < k; ++r) {
      auto res_r = svc.get("/api/neighbor/" + std::to_string(step) + "/" + std::to_string(r));
      ASSERT_EQ(res_r->status, 200);
      auto d = json::parse(res_r->body);
      EXPECT_EQ(d["index"], nbs[r]["index"]);
      const std::size_t sent = d["provenance"]["sentence"];
      const std::size_t pos = d["provenance"]["position"];
      const auto& pair = f.datastore_corpus[sent];
      EXPECT_EQ(d["provenance"]["source"], f.vocab.decode(pair.source, false));
      EXPECT_EQ(d["provenance"]["target"], f.vocab.decode(pair.target, false));
      ASSERT_LT(pos, pair.target.size());
      EXPECT_EQ(pair.target[pos], d["value_id"].get<TokenId>());
      EXPECT_NE(d["provenance"]["highlighted"].get<std::string>().find("[" + f.vocab.surface(pair.target[pos]) + "]"),
                std::string::npos);
    }
    auto beyond = svc.get("/api/neighbor/" + std::to_string(step) + "/" + std::to_string(k));
    EXPECT_EQ(beyond->status, 404);
  }
  EXPECT_EQ(svc.get("/api/neighbor/" + std::to_string(body["traces"].size()) + "/0")->status, 404);
  EXPECT_EQ(svc.get("/api/neighbor/0/0?session=unknown")->status, 404);
}

TEST(Service, NeighborKeyOnlyWhenVerbose) {
  const auto& svc = shared_service();
  ASSERT_EQ(svc.post({{"text", toy_source(5)}})->status, 200);
  auto plain = json::parse(svc.get("/api/neighbor/0/0")->body);
  auto verbose = json::parse(svc.get("/api/neighbor/0/0?verbose=1")->body);
  EXPECT_FALSE(plain.contains("key"));
  ASSERT_TRUE(verbose.contains("key"));
  auto key = verbose["key"].get<std::vector<float>>();
  const auto& f = toy_fixture();
  auto stored = f.store->key(verbose["index"].get<std::size_t>());
  EXPECT_TRUE(std::equal(key.begin(), key.end(), stored.begin(), stored.end()));
}

TEST(Service, NeighborBeforeAnyTranslateIs404) {
  TraceService svc(toy_pipeline(), std::nullopt);
  try {
    svc.neighbor(0, 0, std::nullopt, false);
    FAIL();
  } catch (const HttpError& e) {
    EXPECT_EQ(e.status(), 404);
  }
}

TEST(Service, CorsOnlyForLocalOrigins) {
  auto c = shared_service().client();
  auto local = c.Get("/api/config", {{"Origin", "http://localhost:5173"}});
  EXPECT_EQ(local->get_header_value("Access-Control-Allow-Origin"), "http://localhost:5173");
  auto remote = c.Get("/api/config", {{"Origin", "http://evil.example"}});
  EXPECT_FALSE(remote->has_header("Access-Control-Allow-Origin"));
  auto pre = c.Options("/api/translate", {{"Origin", "http://127.0.0.1:3000"},
                                          {"Access-Control-Request-Method", "POST"}});
  EXPECT_EQ(pre->status, 204);
  EXPECT_EQ(pre->get_header_value("Access-Control-Allow-Origin"), "http://127.0.0.1:3000");
  EXPECT_NE(pre->get_header_value("Access-Control-Allow-Methods").find("POST"), std::string::npos);

  EXPECT_TRUE(is_local_origin("https://[::1]:8080"));
  EXPECT_FALSE(is_local_origin("http://localhost.evil.example"));
  EXPECT_FALSE(is_local_origin("http://localhost:"));
  EXPECT_FALSE(is_local_origin("ftp://localhost"));
}

TEST(Service, ReplayIsByteIdentical) {
  const json req{{"text", toy_source(6)}, {"overrides", {{"lambda", 0.7}, {"beam", 2}}}};
  auto a = shared_service().post(req);
  shared_service().post({{"text", toy_source(7)}});
  auto b = shared_service().post(req);
  ASSERT_EQ(a->status, 200);
  EXPECT_EQ(a->body, b->body);

  TraceService other(toy_pipeline(), toy_fixture().datastore_corpus);
  EXPECT_EQ(other.translate(req.dump()).dump(), a->body);
}

TEST(Service, ConcurrentRequestsMatchSequential) {
  std::vector<std::string> expected(8);
  for (std::size_t i = 0; i < expected.size(); ++i) expected[i] = shared_service().post({{"text", toy_source(i)}})->body;
  std::vector<std::string> got(expected.size());
  std::vector<std::thread> workers;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    workers.emplace_back([&, i] { got[i] = shared_service().post({{"text", toy_source(i)}})->body; });
  }
  for (auto& w : workers) w.join();
  EXPECT_EQ(got, expected);
}

void expect_summary_valid(const json& s) {
  double prev = INFINITY;
  double mass = 0.0;
  for (const auto& tp : s["top"]) {
    const double p = tp["prob"];
    EXPECT_GE(p, 0.0);
    EXPECT_LE(p, 1.0);
    EXPECT_LE(p, prev);
    prev = p;
    mass += p;
  }
  EXPECT_LE(s["top"].size(), 10u);
  for (const char* field : {"chosen_prob", "other_mass"}) {
    EXPECT_GE(s[field].get<double>(), 0.0);
    EXPECT_LE(s[field].get<double>(), 1.0);
  }
  EXPECT_NEAR(mass + s["other_mass"].get<double>(), 1.0, 1e-9);
}

TEST(Service, ProbabilitiesBoundedAndSorted) {
  for (double lambda : {0.0, 0.3, 1.0}) {
    auto res = shared_service().post({{"text", toy_source(8)}, {"overrides", {{"lambda", lambda}}}});
    ASSERT_EQ(res->status, 200);
    auto body = json::parse(res->body);
    for (const auto& t : body["traces"]) {
      expect_summary_valid(t["p_nmt"]);
      expect_summary_valid(t["p_final"]);
      if (!t["p_knn"].is_null()) expect_summary_valid(t["p_knn"]);
      double prev = -1.0;
      for (const auto& n : t["neighbors"]) {
        EXPECT_GE(n["distance"].get<double>(), prev);
        prev = n["distance"];
      }
    }
  }
}

TEST(Service, AdaptiveWithoutMetaNetIs400) {
  auto res = shared_service().post({{"text", toy_source(0)}, {"overrides", {{"variant", "adaptive"}}}});
  EXPECT_EQ(res->status, 400);
}

TEST(Service, ProjectionKeepsNearestNeighbor) {
  const auto& f = toy_fixture();
  TraceService svc(toy_pipeline(), std::nullopt);
  std::size_t steps = 0;
  std::size_t kept = 0;
  for (std::size_t i = 0; i < 50; ++i) {
    auto body = svc.translate(json{{"text", f.raw.test[i].first}});
    for (const auto& t : body["traces"]) {
      const double qx = t["query_xy"][0];
      const double qy = t["query_xy"][1];
      const auto& nbs = t["neighbors"];
      std::size_t best = 0;
      double best_d = INFINITY;
      for (std::size_t r = 0; r < nbs.size(); ++r) {
        const double dx = nbs[r]["xy"][0].get<double>() - qx;
        const double dy = nbs[r]["xy"][1].get<double>() - qy;
        if (dx * dx + dy * dy < best_d) {
          best_d = dx * dx + dy * dy;
          best = r;
        }
      }
      ++steps;
      // Duplicate keys tie in both spaces; any neighbor at the minimum distance counts.
      if (nbs[best]["distance"].get<double>() <= nbs[0]["distance"].get<double>() * (1 + 1e-9)) ++kept;
    }
  }
  ASSERT_GT(steps, 100u);
  EXPECT_GE(static_cast<double>(kept) / static_cast<double>(steps), 0.9)
      << kept << " of " << steps << " steps";
}

TEST(Service, ProjectionDegenerateIsZero) {
  NeighborSet set;
  std::vector<float> q{1, 2, 3};
  for (int i = 0; i < 3; ++i) set.items.push_back({static_cast<std::size_t>(i), 0.0, 5, {}, q});
  auto xy = project_step(q, set);
  ASSERT_EQ(xy.size(), 4u);
  for (const auto& p : xy) {
    EXPECT_EQ(p[0], 0.0);
    EXPECT_EQ(p[1], 0.0);
  }
}

TEST(Service, ProvenanceCorpusMustMatchStore) {
  EXPECT_THROW(TraceService(toy_pipeline(), toy_fixture().test), StaleArtifact);
}

}  // namespace
}  // namespace knnmt
