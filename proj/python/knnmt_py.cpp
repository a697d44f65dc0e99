#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <set>

#include "knnmt/compression.hpp"
#include "knnmt/metrics.hpp"
#include "knnmt/pipeline.hpp"
#include "knnmt/toy.hpp"
#include "knnmt/trace_service.hpp"
#include "knnmt/trainer.hpp"

namespace py = pybind11;
using namespace knnmt;

namespace {

py::object to_python(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_python(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

std::vector<double> probs(const Distribution& p) { return {p.probs().begin(), p.probs().end()}; }

NeighborSet neighbors_from(const std::vector<double>& distances, const std::vector<TokenId>& values) {
  if (distances.size() != values.size()) throw InvalidArgument("distances and values differ in length");
  NeighborSet s;
  for (std::size_t i = 0; i < distances.size(); ++i) {
    Neighbor n;
    n.index = i;
    n.distance = distances[i];
    n.value = values[i];
    s.items.push_back(std::move(n));
  }
  return s;
}

PipelineConfig config_from(const py::dict& d) {
  PipelineConfig cfg;
  auto j = from_python(d);
  for (const auto& [key, _] : j.items()) {
    static const std::set<std::string> known{"model", "datastore", "ivf", "pca", "metanet", "lambda",
                                             "temperature", "k", "variant", "nprobe"};
    if (!known.contains(key)) throw InvalidArgument("unknown config key '" + key + "'");
  }
  cfg.model = j.at("model").get<std::string>();
  for (auto [key, slot] : {std::pair{"datastore", &cfg.datastore}, std::pair{"ivf", &cfg.ivf},
                           std::pair{"pca", &cfg.pca}, std::pair{"metanet", &cfg.metanet}}) {
    if (j.contains(key) && !j[key].is_null()) *slot = j[key].get<std::string>();
  }
  if (j.contains("lambda")) cfg.combiner.lambda = j["lambda"].get<double>();
  if (j.contains("temperature")) cfg.combiner.temperature = j["temperature"].get<double>();
  if (j.contains("k")) cfg.combiner.k = j["k"].get<std::size_t>();
  if (j.contains("variant")) cfg.combiner.variant = parse_variant(j["variant"].get<std::string>());
  if (j.contains("nprobe") && !j["nprobe"].is_null()) cfg.nprobe = j["nprobe"].get<std::size_t>();
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_knnmt, m) {
  m.doc() = "Nearest-neighbour augmented seq2seq toolkit";

  // Later registrations are tried first, so the base class goes first.
  auto error = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<FormatError>(m, "FormatError", error.ptr());
  py::register_exception<StaleArtifact>(m, "StaleArtifact", error.ptr());
  py::register_exception<InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);

  m.def(
      "toy_corpus",
      [](std::uint64_t seed, std::size_t medical_pool) {
        ToyCorpusOptions opts;
        opts.seed = seed;
        opts.medical_pool = medical_pool;
        auto c = make_toy_corpus(opts);
        py::dict d;
        d["train"] = c.train;
        d["datastore"] = c.datastore;
        d["heldout"] = c.heldout;
        d["test"] = c.test;
        return d;
      },
      py::arg("seed") = 7, py::arg("medical_pool") = 150,
      "The bundled synthetic two-domain corpus as lists of (source, target) pairs.");

  py::class_<Vocab>(m, "Vocab")
      .def(py::init<std::vector<std::string>>())
      .def_static(
          "build", [](const std::vector<RawPair>& pairs, std::size_t max_size) { return build_vocab(pairs, max_size); },
          py::arg("pairs"), py::arg("max_size") = 10000)
      .def("__len__", &Vocab::size)
      .def("id", &Vocab::id)
      .def("surface", &Vocab::surface)
      .def("encode", &Vocab::encode, "Whitespace tokens to ids; unk for unknown words.")
      .def("decode", [](const Vocab& v, const std::vector<TokenId>& ids) { return v.decode(ids); })
      .def_property_readonly("tokens", &Vocab::surfaces);

  py::class_<ParallelCorpus>(m, "Corpus")
      .def(py::init([](std::string name, const std::vector<RawPair>& pairs, const Vocab& vocab) {
             return ParallelCorpus::encode(std::move(name), pairs, vocab);
           }),
           py::arg("name"), py::arg("pairs"), py::arg("vocab"))
      .def_property_readonly("name", &ParallelCorpus::name)
      .def("__len__", &ParallelCorpus::size)
      .def("__getitem__", [](const ParallelCorpus& c, std::size_t i) {
        const auto& p = c[i];
        return py::make_tuple(p.source, p.target);
      });

  py::class_<BaseModel, std::shared_ptr<BaseModel>>(m, "BaseModel")
      .def_static("initialize", &BaseModel::initialize, py::arg("vocab"), py::arg("dim") = 64, py::arg("window") = 3,
                  py::arg("seed") = 1)
      .def_static("load", &BaseModel::load)
      .def("save", &BaseModel::save)
      .def_property_readonly("vocab", &BaseModel::vocab)
      .def_property_readonly("dim", &BaseModel::dim)
      .def_property_readonly("window", &BaseModel::window)
      .def_property_readonly("fingerprint", [](const BaseModel& b) { return hex64(b.fingerprint()); })
      .def(
          "train",
          [](BaseModel& b, const ParallelCorpus& corpus, int epochs, double lr, std::uint64_t seed) {
            TrainReport r;
            {
              py::gil_scoped_release release;
              r = train(b, corpus, {epochs, lr, seed});
            }
            py::dict d;
            d["initial_loss"] = r.initial_loss;
            d["final_loss"] = r.final_loss;
            d["epoch_loss"] = r.epoch_loss;
            return d;
          },
          py::arg("corpus"), py::arg("epochs") = 20, py::arg("lr") = 0.2, py::arg("seed") = 1)
      .def(
          "step",
          [](const BaseModel& b, const std::vector<TokenId>& source, const std::vector<TokenId>& prefix) {
            auto s = b.forward_step(source, prefix);
            return py::make_tuple(s.hidden, probs(s.probs));
          },
          "Hidden state and next-token distribution for a source and target prefix.");

  py::class_<Datastore, std::shared_ptr<Datastore>>(m, "Datastore")
      .def_static("build", &build_datastore, py::arg("model"), py::arg("corpus"),
                  py::call_guard<py::gil_scoped_release>())
      .def_static("load", &Datastore::load)
      .def("save", &Datastore::save)
      .def("__len__", &Datastore::size)
      .def_property_readonly("dim", &Datastore::dim)
      .def_property_readonly("scale", &Datastore::scale)
      .def_property_readonly("fingerprint", [](const Datastore& d) { return hex64(d.fingerprint()); })
      .def_property_readonly("meta", [](const Datastore& d) { return to_python(d.meta_json()); })
      .def("key", [](const Datastore& d, std::size_t i) {
        if (i >= d.size()) throw py::index_error();
        auto k = d.key(i);
        return std::vector<float>(k.begin(), k.end());
      })
      .def("value", [](const Datastore& d, std::size_t i) {
        if (i >= d.size()) throw py::index_error();
        return d.value(i);
      })
      .def("search", [](const Datastore& d, const std::vector<float>& query, std::size_t k) {
        if (query.size() != d.dim()) throw InvalidArgument("query dimension mismatch");
        py::list out;
        for (const auto& n : search_exact(d, query, k).items) out.append(py::make_tuple(n.index, n.distance, n.value));
        return out;
      }, "Exact k nearest entries as (index, L2-square distance, value) tuples.");

  auto report = [](std::pair<Datastore, PruneReport> r) {
    return py::make_tuple(std::make_shared<Datastore>(std::move(r.first)), to_python(r.second.to_json()));
  };
  m.def(
      "prune_margin",
      [report](const Datastore& d, const BaseModel& model, const ParallelCorpus& corpus, std::size_t rank) {
        return report(prune_knowledge_margin(d, model, corpus, rank));
      },
      py::arg("datastore"), py::arg("model"), py::arg("corpus"), py::arg("rank") = 1);
  m.def(
      "prune_redundant",
      [report](const Datastore& d, std::size_t neighbors, std::optional<double> threshold) {
        RedundancyOptions opts;
        opts.neighbors = neighbors;
        opts.threshold = threshold;
        return report(prune_redundant(d, opts));
      },
      py::arg("datastore"), py::arg("neighbors") = 2, py::arg("threshold") = std::nullopt);
  m.def(
      "corrupt_values",
      [](const Datastore& d, double fraction, std::size_t vocab_size, std::uint64_t seed) {
        return std::make_shared<Datastore>(corrupt_values(d, fraction, vocab_size, seed));
      },
      py::arg("datastore"), py::arg("fraction"), py::arg("vocab_size"), py::arg("seed") = 1);

  m.def(
      "knn_distribution",
      [](const std::vector<double>& distances, const std::vector<TokenId>& values, double temperature,
         std::size_t vocab_size) { return probs(knn_distribution(neighbors_from(distances, values), temperature, vocab_size)); },
      py::arg("distances"), py::arg("values"), py::arg("temperature"), py::arg("vocab_size"));
  m.def(
      "interpolate",
      [](const std::vector<double>& p_knn, const std::vector<double>& p_nmt, double lambda) {
        return probs(interpolate(Distribution(p_knn), Distribution(p_nmt), lambda));
      },
      py::arg("p_knn"), py::arg("p_nmt"), py::arg("lam"));
  m.def(
      "corpus_bleu",
      [](const std::vector<std::vector<TokenId>>& hyps, const std::vector<std::vector<TokenId>>& refs) {
        return corpus_bleu(hyps, refs).score;
      },
      py::arg("hypotheses"), py::arg("references"));

  py::class_<Pipeline>(m, "Pipeline")
      .def(py::init([](std::shared_ptr<BaseModel> model, std::shared_ptr<Datastore> store, double lambda,
                       double temperature, std::size_t k) {
             return Pipeline(std::move(model), std::move(store), {lambda, temperature, k});
           }),
           py::arg("model"), py::arg("datastore") = nullptr, py::arg("lam") = 0.5, py::arg("temperature") = 10.0,
           py::arg("k") = 8)
      .def_static("load", [](const py::dict& cfg) { return Pipeline::load(config_from(cfg)); },
                  "Load artifacts from files: keys model, datastore, ivf, pca, metanet, lambda, temperature, k, "
                  "variant, nprobe.")
      .def("describe", [](const Pipeline& p) { return to_python(p.describe()); })
      .def(
          "translate",
          [](const Pipeline& p, const std::string& text, std::size_t beam, std::size_t max_len) {
            const auto& vocab = p.model().vocab();
            auto source = vocab.encode(text);
            if (source.empty()) throw InvalidArgument("empty source sentence");
            Generation g;
            {
              py::gil_scoped_release release;
              g = p.generate(source, beam, max_len);
            }
            std::vector<std::string> tokens;
            for (TokenId t : g.tokens) tokens.push_back(vocab.surface(t));
            py::dict d;
            d["tokens"] = tokens;
            d["text"] = vocab.decode(g.tokens);
            d["finished"] = g.finished;
            d["score"] = g.score;
            return d;
          },
          py::arg("text"), py::arg("beam") = 1, py::arg("max_len") = 32)
      .def(
          "evaluate",
          [](const Pipeline& p, const ParallelCorpus& test, const std::string& mode, std::size_t beam,
             std::size_t threads) {
            EvalReport r;
            {
              py::gil_scoped_release release;
              r = p.evaluate(test, parse_eval_mode(mode), beam, 32, threads);
            }
            return to_python(r.to_json());
          },
          py::arg("test"), py::arg("mode") = "teacher_forced", py::arg("beam") = 1, py::arg("threads") = 1);

  py::class_<TraceService>(m, "TraceService")
      .def(py::init([](const Pipeline& p, std::optional<ParallelCorpus> corpus) {
             return std::make_unique<TraceService>(p, std::move(corpus));
           }),
           py::arg("pipeline"), py::arg("corpus") = std::nullopt)
      .def("translate", [](TraceService& s, const py::object& body) {
        try {
          return to_python(s.translate(from_python(body)));
        } catch (const HttpError& e) {
          throw py::value_error(std::to_string(e.status()) + ": " + e.what());
        }
      }, "The /api/translate handler; errors raise ValueError prefixed with the HTTP status.")
      .def("config", [](const TraceService& s) { return to_python(s.config()); });
}
