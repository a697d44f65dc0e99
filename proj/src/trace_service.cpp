#include "knnmt/trace_service.hpp"

#include <charconv>

#include "httplib.h"
#include "knnmt/compression.hpp"

namespace knnmt {
namespace {

using nlohmann::json;

constexpr std::size_t kMaxBeam = 16;
constexpr std::size_t kMaxLength = 256;

double number_field(const json& v, const char* name) {
  if (!v.is_number()) throw HttpError(400, std::string("override '") + name + "' must be a number");
  return v.get<double>();
}

std::size_t count_field(const json& v, const char* name) {
  if (!v.is_number_integer() || v.get<long long>() < 1) {
    throw HttpError(400, std::string("override '") + name + "' must be a positive integer");
  }
  return v.get<std::size_t>();
}

json summary_json(const DistributionSummary& s, const Vocab& vocab) {
  json top = json::array();
  for (const auto& tp : s.top) top.push_back({{"id", tp.token}, {"token", vocab.surface(tp.token)}, {"prob", tp.prob}});
  json j{{"top", top}, {"chosen_prob", s.chosen_prob}, {"other_mass", s.other_mass}};
  if (!s.full.empty()) j["full"] = s.full;
  return j;
}

std::string session_id(const json& body) {
  const std::string canonical = body.dump();
  return hex64(fnv1a(std::string_view(canonical)));
}

}  // namespace

std::vector<std::array<double, 2>> project_step(std::span<const float> query, const NeighborSet& neighbors) {
  const std::size_t dim = query.size();
  const std::size_t n = neighbors.size() + 1;
  std::vector<std::array<double, 2>> out(n, {0.0, 0.0});
  if (n < 2 || dim < 2) return out;
  std::vector<float> points(query.begin(), query.end());
  for (const auto& nb : neighbors.items) points.insert(points.end(), nb.key.begin(), nb.key.end());
  std::optional<PcaTransform> pca;
  try {
    pca.emplace(fit_pca(points, n, dim, 2));
  } catch (const InvalidArgument&) {
    return out;  // no spread: every point sits at the origin
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto xy = pca->apply(std::span<const float>(points).subspan(i * dim, dim));
    out[i] = {xy[0], xy[1]};
  }
  return out;
}

bool is_local_origin(std::string_view origin) {
  for (std::string_view scheme : {"http://", "https://"}) {
    if (!origin.starts_with(scheme)) continue;
    auto rest = origin.substr(scheme.size());
    for (std::string_view host : {"localhost", "127.0.0.1", "[::1]"}) {
      if (!rest.starts_with(host)) continue;
      auto tail = rest.substr(host.size());
      if (tail.empty()) return true;
      if (tail.front() != ':' || tail.size() == 1) return false;
      return std::all_of(tail.begin() + 1, tail.end(), [](char c) { return c >= '0' && c <= '9'; });
    }
  }
  return false;
}

TraceService::TraceService(Pipeline pipeline, std::optional<ParallelCorpus> datastore_corpus,
                           TraceServiceOptions opts)
    : pipeline_(std::move(pipeline)), corpus_(std::move(datastore_corpus)), opts_(opts) {
  if (corpus_ && pipeline_.datastore() && corpus_->name() != pipeline_.datastore()->meta().corpus) {
    throw StaleArtifact("provenance corpus '" + corpus_->name() + "' is not the datastore corpus '" +
                        pipeline_.datastore()->meta().corpus + "'");
  }
  if (opts_.remembered_sessions == 0) opts_.remembered_sessions = 1;
}

json TraceService::translate(const std::string& body) {
  json parsed = json::parse(body, nullptr, /*allow_exceptions=*/false);
  if (parsed.is_discarded()) throw HttpError(400, "request body is not valid JSON");
  return translate(parsed);
}

json TraceService::translate(const json& body) {
  if (!body.is_object()) throw HttpError(400, "request body must be a JSON object");
  for (const auto& [key, _] : body.items()) {
    if (key != "text" && key != "overrides" && key != "verbose") {
      throw HttpError(400, "unknown request field '" + key + "'");
    }
  }
  if (!body.contains("text") || !body["text"].is_string()) throw HttpError(400, "'text' must be a string");
  bool verbose = false;
  if (body.contains("verbose")) {
    if (!body["verbose"].is_boolean()) throw HttpError(400, "'verbose' must be a boolean");
    verbose = body["verbose"].get<bool>();
  }

  CombinerConfig combiner = pipeline_.combiner();
  std::size_t beam = opts_.beam;
  std::size_t max_len = opts_.max_len;
  if (body.contains("overrides")) {
    const auto& ov = body["overrides"];
    if (!ov.is_object()) throw HttpError(400, "'overrides' must be an object");
    for (const auto& [key, v] : ov.items()) {
      if (key == "lambda") {
        combiner.lambda = number_field(v, "lambda");
        if (!(combiner.lambda >= 0.0 && combiner.lambda <= 1.0)) throw HttpError(400, "lambda must be in [0, 1]");
      } else if (key == "temperature") {
        combiner.temperature = number_field(v, "temperature");
        if (!(combiner.temperature > 0.0) || !std::isfinite(combiner.temperature)) {
          throw HttpError(400, "temperature must be > 0");
        }
      } else if (key == "k") {
        combiner.k = count_field(v, "k");
      } else if (key == "variant") {
        if (!v.is_string()) throw HttpError(400, "override 'variant' must be a string");
        try {
          combiner.variant = parse_variant(v.get<std::string>());
        } catch (const InvalidArgument& e) {
          throw HttpError(400, e.what());
        }
      } else if (key == "beam") {
        beam = count_field(v, "beam");
        if (beam > kMaxBeam) throw HttpError(400, "beam must be <= " + std::to_string(kMaxBeam));
      } else if (key == "max_len") {
        max_len = count_field(v, "max_len");
        if (max_len > kMaxLength) throw HttpError(400, "max_len must be <= " + std::to_string(kMaxLength));
      } else {
        throw HttpError(400, "unknown override '" + key + "'");
      }
    }
  }
  if (const auto* ds = pipeline_.datastore(); ds != nullptr && combiner.k > ds->size()) {
    throw HttpError(400, "k must be <= datastore size " + std::to_string(ds->size()));
  }

  const auto& vocab = pipeline_.model().vocab();
  auto source = vocab.encode(body["text"].get<std::string>());
  if (source.empty()) throw HttpError(422, "input text is empty");

  std::optional<Pipeline> pipe;
  try {
    pipe.emplace(pipeline_.with_combiner(combiner));
  } catch (const InvalidArgument& e) {
    throw HttpError(400, e.what());
  }
  auto gen = pipe->generate(source, beam, max_len, verbose);

  json traces = json::array();
  for (const auto& st : gen.trace) {
    auto xy = project_step(st.query, st.neighbors);
    json neighbors = json::array();
    for (std::size_t r = 0; r < st.neighbors.size(); ++r) {
      const auto& nb = st.neighbors[r];
      json item{{"rank", r},
                {"index", nb.index},
                {"value_id", nb.value},
                {"value", vocab.surface(nb.value)},
                {"distance", nb.distance},
                {"xy", {xy[r + 1][0], xy[r + 1][1]}},
                {"provenance", provenance_json(nb)}};
      if (verbose) item["key"] = nb.key;
      neighbors.push_back(std::move(item));
    }
    json t{{"step", st.step},
           {"chosen", {{"id", st.chosen}, {"token", vocab.surface(st.chosen)}}},
           {"p_nmt", summary_json(st.p_nmt, vocab)},
           {"p_knn", st.p_knn ? summary_json(*st.p_knn, vocab) : json(nullptr)},
           {"p_final", summary_json(st.p_final, vocab)},
           {"query_xy", {xy[0][0], xy[0][1]}},
           {"neighbors", neighbors}};
    if (!st.option_weights.empty()) t["option_weights"] = st.option_weights;
    if (verbose) t["query"] = st.query;
    traces.push_back(std::move(t));
  }

  json tokens = json::array();
  for (TokenId id : gen.tokens) tokens.push_back(vocab.surface(id));
  json source_tokens = json::array();
  for (TokenId id : source) source_tokens.push_back(vocab.surface(id));

  auto rec = std::make_shared<Recorded>();
  rec->session = session_id(body);
  json response{{"session", rec->session},
                {"source_tokens", source_tokens},
                {"tokens", tokens},
                {"token_ids", gen.tokens},
                {"text", vocab.decode(gen.tokens)},
                {"finished", gen.finished},
                {"score", gen.score},
                {"config",
                 {{"lambda", combiner.lambda},
                  {"temperature", combiner.temperature},
                  {"k", combiner.k},
                  {"variant", to_string(combiner.variant)},
                  {"beam", beam},
                  {"max_len", max_len}}},
                {"traces", traces}};
  rec->generation = std::move(gen);
  {
    std::lock_guard lock(mu_);
    std::erase_if(recent_, [&](const auto& r) { return r->session == rec->session; });
    recent_.push_back(std::move(rec));
    while (recent_.size() > opts_.remembered_sessions) recent_.pop_front();
  }
  return response;
}

json TraceService::config() const {
  json j = pipeline_.describe();
  j["beam"] = opts_.beam;
  j["max_len"] = opts_.max_len;
  j["projection"] = "per-step PCA over the query and its neighbor keys";
  j["provenance_text"] = corpus_.has_value();
  if (const auto* ds = pipeline_.datastore()) {
    json details = json::array();
    for (const auto& t : ds->meta().transforms) details.push_back({{"kind", t.kind}, {"params", t.params}});
    j["datastore"]["transform_details"] = details;
    j["datastore"]["model_fp"] = hex64(ds->meta().model_fp);
    j["datastore"]["vocab_fp"] = hex64(ds->meta().vocab_fp);
  }
  j["metanet"] = pipeline_.metanet() ? json{{"k", pipeline_.metanet()->k()}, {"hidden", pipeline_.metanet()->hidden()}}
                                     : json(nullptr);
  j["pca"] = pipeline_.pca() ? json{{"input_dim", pipeline_.pca()->input_dim()}, {"output_dim", pipeline_.pca()->output_dim()}}
                             : json(nullptr);
  return j;
}

json TraceService::provenance_json(const Neighbor& n) const {
  json j{{"sentence", n.provenance.sentence}, {"position", n.provenance.position}};
  if (!corpus_ || n.provenance.sentence >= corpus_->size()) return j;
  const auto& vocab = pipeline_.model().vocab();
  const auto& pair = (*corpus_)[n.provenance.sentence];
  j["source"] = vocab.decode(pair.source, false);
  j["target"] = vocab.decode(pair.target, false);
  std::string highlighted;
  for (std::size_t i = 0; i < pair.target.size(); ++i) {
    if (i > 0) highlighted += ' ';
    const auto& w = vocab.surface(pair.target[i]);
    highlighted += i == n.provenance.position ? "[" + w + "]" : w;
  }
  j["highlighted"] = highlighted;
  return j;
}

std::shared_ptr<const TraceService::Recorded> TraceService::lookup(
    const std::optional<std::string>& session) const {
  std::lock_guard lock(mu_);
  if (recent_.empty()) throw HttpError(404, "no translate request has been served yet");
  if (!session) return recent_.back();
  for (const auto& r : recent_) {
    if (r->session == *session) return r;
  }
  throw HttpError(404, "unknown session '" + *session + "'");
}

json TraceService::neighbor(std::size_t step, std::size_t rank, const std::optional<std::string>& session,
                            bool verbose) const {
  auto rec = lookup(session);
  const auto& trace = rec->generation.trace;
  if (step >= trace.size()) {
    throw HttpError(404, "step " + std::to_string(step) + " out of range (" + std::to_string(trace.size()) + " steps)");
  }
  const auto& nbs = trace[step].neighbors;
  if (rank >= nbs.size()) {
    throw HttpError(404, "rank " + std::to_string(rank) + " out of range (" + std::to_string(nbs.size()) + " neighbors)");
  }
  const auto& nb = nbs[rank];
  const auto& vocab = pipeline_.model().vocab();
  json j{{"session", rec->session},
         {"step", step},
         {"rank", rank},
         {"index", nb.index},
         {"value_id", nb.value},
         {"value", vocab.surface(nb.value)},
         {"distance", nb.distance},
         {"provenance", provenance_json(nb)}};
  if (verbose) j["key"] = nb.key;
  return j;
}

void TraceService::install(httplib::Server& server) {
  auto send = [](httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  };
  auto guarded = [send](auto&& fn) {
    return [send, fn](const httplib::Request& req, httplib::Response& res) {
      try {
        send(res, 200, fn(req));
      } catch (const HttpError& e) {
        send(res, e.status(), {{"error", e.what()}});
      } catch (const std::exception& e) {
        send(res, 500, {{"error", e.what()}});
      }
    };
  };

  server.Post("/api/translate", guarded([this](const httplib::Request& req) { return translate(req.body); }));
  server.Get("/api/config", guarded([this](const httplib::Request&) { return config(); }));
  server.Get(R"(/api/neighbor/(\d+)/(\d+))", guarded([this](const httplib::Request& req) {
               auto parse = [](const std::string& s) {
                 std::size_t v = 0;
                 auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
                 if (ec != std::errc() || ptr != s.data() + s.size()) throw HttpError(404, "index out of range");
                 return v;
               };
               std::optional<std::string> session;
               if (req.has_param("session")) session = req.get_param_value("session");
               const bool verbose = req.has_param("verbose") && req.get_param_value("verbose") != "0" &&
                                    req.get_param_value("verbose") != "false";
               return neighbor(parse(req.matches[1]), parse(req.matches[2]), session, verbose);
             }));
  server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  server.set_post_routing_handler([](const httplib::Request& req, httplib::Response& res) {
    const auto origin = req.get_header_value("Origin");
    if (!origin.empty() && is_local_origin(origin)) {
      res.set_header("Access-Control-Allow-Origin", origin);
      res.set_header("Vary", "Origin");
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
    }
  });
  server.set_error_handler([send](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) send(res, res.status, {{"error", httplib::status_message(res.status)}});
  });
}

}  // namespace knnmt
