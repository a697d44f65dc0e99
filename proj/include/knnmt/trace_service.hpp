#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "json.hpp"
#include "knnmt/pipeline.hpp"

namespace httplib {
class Server;
}

namespace knnmt {

// Error carrying the HTTP status a handler should answer with.
class HttpError : public Error {
 public:
  HttpError(int status, const std::string& what) : Error(what), status_(status) {}
  int status() const { return status_; }

 private:
  int status_;
};

struct TraceServiceOptions {
  std::size_t beam = 1;
  std::size_t max_len = 32;
  // Responses kept for /api/neighbor lookups.
  std::size_t remembered_sessions = 32;
};

// JSON handlers behind the inspection API. Each translate request builds
// its own pipeline from the shared artifacts plus the request's overrides,
// so handlers can run concurrently. The corpus the datastore was built from
// is optional and only used to show provenance text.
class TraceService {
 public:
  TraceService(Pipeline pipeline, std::optional<ParallelCorpus> datastore_corpus,
               TraceServiceOptions opts = {});

  // POST /api/translate. Throws HttpError(400) on a malformed body or bad
  // overrides and HttpError(422) on empty input.
  nlohmann::json translate(const nlohmann::json& body);
  nlohmann::json translate(const std::string& body);

  // GET /api/config
  nlohmann::json config() const;

  // GET /api/neighbor/{step}/{rank}. Without a session id the most recent
  // translate response is used. Throws HttpError(404) when out of range.
  nlohmann::json neighbor(std::size_t step, std::size_t rank,
                          const std::optional<std::string>& session, bool verbose) const;

  // Routes, CORS for localhost origins and JSON error bodies.
  void install(httplib::Server& server);

  const Pipeline& pipeline() const { return pipeline_; }

 private:
  struct Recorded {
    std::string session;
    Generation generation;
  };

  nlohmann::json provenance_json(const Neighbor& n) const;
  std::shared_ptr<const Recorded> lookup(const std::optional<std::string>& session) const;

  Pipeline pipeline_;
  std::optional<ParallelCorpus> corpus_;
  TraceServiceOptions opts_;
  mutable std::mutex mu_;
  std::deque<std::shared_ptr<const Recorded>> recent_;
};

// Per-step 2-D projection: PCA fitted on the query plus its neighbor keys.
// Row 0 is the query, row i the (i-1)-th neighbor. All zeros when the
// points have no spread.
std::vector<std::array<double, 2>> project_step(std::span<const float> query,
                                                const NeighborSet& neighbors);

// True for http(s)://localhost or 127.0.0.1 origins, any port.
bool is_local_origin(std::string_view origin);

}  // namespace knnmt
