// knnmt: command-line front end. Every subcommand prints one JSON object per
// line on stdout. Exit codes: 0 success, 2 usage or configuration error,
// 1 runtime failure.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "httplib.h"
#include "json.hpp"
#include "knnmt/compression.hpp"
#include "knnmt/pipeline.hpp"
#include "knnmt/toy.hpp"
#include "knnmt/trace_service.hpp"
#include "knnmt/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace knnmt;

namespace {

void emit(const json& j) { std::cout << j.dump() << std::endl; }

ParallelCorpus load_corpus(const fs::path& path, const Vocab& vocab) {
  auto raw = read_tsv(path);
  return ParallelCorpus::encode(path.stem().string(), raw, vocab);
}

// Flags shared by every command that runs the pipeline.
struct PipelineFlags {
  std::string model;
  std::string datastore;
  std::string ivf;
  std::string pca;
  std::string metanet;
  double lambda = CombinerConfig{}.lambda;
  double temperature = CombinerConfig{}.temperature;
  std::size_t k = CombinerConfig{}.k;
  std::string variant = "basic";
  std::size_t nprobe = 0;
  std::size_t beam = 1;
  std::size_t max_len = 32;

  void attach(CLI::App* app) {
    app->add_option("--model", model, "model checkpoint")->required()->check(CLI::ExistingFile);
    app->add_option("--datastore", datastore, "datastore directory")->check(CLI::ExistingDirectory);
    app->add_option("--ivf", ivf, "IVF index file")->check(CLI::ExistingFile);
    app->add_option("--pca", pca, "PCA transform file")->check(CLI::ExistingFile);
    app->add_option("--metanet", metanet, "meta network checkpoint")->check(CLI::ExistingFile);
    app->add_option("--lambda", lambda, "interpolation weight");
    app->add_option("--temperature", temperature, "kNN temperature");
    app->add_option("--k", k, "neighbors per step");
    app->add_option("--variant", variant, "combiner: basic | adaptive");
    app->add_option("--nprobe", nprobe, "IVF lists to scan (index default when 0)");
    app->add_option("--beam", beam, "beam width");
    app->add_option("--max-len", max_len, "maximum output length");
  }

  PipelineConfig config() const {
    PipelineConfig cfg;
    cfg.model = model;
    if (!datastore.empty()) cfg.datastore = datastore;
    if (!ivf.empty()) cfg.ivf = ivf;
    if (!pca.empty()) cfg.pca = pca;
    if (!metanet.empty()) cfg.metanet = metanet;
    cfg.combiner = {lambda, temperature, k, parse_variant(variant)};
    if (nprobe > 0) cfg.nprobe = nprobe;
    if (beam < 1) throw InvalidArgument("--beam must be >= 1");
    if (max_len < 1) throw InvalidArgument("--max-len must be >= 1");
    cfg.beam = beam;
    cfg.max_len = max_len;
    return cfg;
  }
};

int run(int argc, char** argv) {
  CLI::App app{"kNN-augmented seq2seq toolkit"};
  app.require_subcommand(1);

  // toy-corpus
  auto* toy_cmd = app.add_subcommand("toy-corpus", "write the synthetic two-domain corpus as TSV files");
  std::string toy_out;
  ToyCorpusOptions toy_opts;
  toy_cmd->add_option("--out", toy_out, "output directory")->required();
  toy_cmd->add_option("--seed", toy_opts.seed, "generator seed");
  toy_cmd->add_option("--train-pairs", toy_opts.train_pairs);
  toy_cmd->add_option("--datastore-pairs", toy_opts.datastore_pairs);
  toy_cmd->add_option("--heldout-pairs", toy_opts.heldout_pairs);
  toy_cmd->add_option("--test-pairs", toy_opts.test_pairs);
  toy_cmd->add_option("--medical-pool", toy_opts.medical_pool, "distinct medical sentences (0 = unlimited)");

  // train-base
  auto* train_cmd = app.add_subcommand("train-base", "train the base model");
  std::string train_tsv, train_out;
  std::vector<std::string> vocab_tsvs;
  std::size_t dim = 64, window = 3, max_vocab = 50000;
  TrainOptions train_opts;
  train_cmd->add_option("--train", train_tsv, "training corpus (TSV)")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("--vocab-corpus", vocab_tsvs, "extra TSV files whose tokens join the vocabulary")
      ->check(CLI::ExistingFile);
  train_cmd->add_option("--dim", dim, "hidden size d");
  train_cmd->add_option("--window", window, "target window m");
  train_cmd->add_option("--max-vocab", max_vocab, "vocabulary size cap, specials included");
  train_cmd->add_option("--epochs", train_opts.epochs);
  train_cmd->add_option("--lr", train_opts.lr);
  train_cmd->add_option("--seed", train_opts.seed);
  train_cmd->add_option("--out", train_out, "checkpoint path")->required();

  // build
  auto* build_cmd = app.add_subcommand("build", "build a datastore by a teacher-forced pass");
  std::string build_model, build_corpus, build_out;
  build_cmd->add_option("--model", build_model)->required()->check(CLI::ExistingFile);
  build_cmd->add_option("--corpus", build_corpus, "corpus (TSV)")->required()->check(CLI::ExistingFile);
  build_cmd->add_option("--out", build_out, "datastore directory")->required();

  // ivf
  auto* ivf_cmd = app.add_subcommand("ivf", "build an IVF index over a datastore");
  std::string ivf_ds, ivf_out;
  IvfBuildOptions ivf_opts;
  ivf_cmd->add_option("--datastore", ivf_ds)->required()->check(CLI::ExistingDirectory);
  ivf_cmd->add_option("--clusters", ivf_opts.clusters);
  ivf_cmd->add_option("--nprobe", ivf_opts.nprobe);
  ivf_cmd->add_option("--iterations", ivf_opts.iterations);
  ivf_cmd->add_option("--seed", ivf_opts.seed);
  ivf_cmd->add_option("--out", ivf_out, "index file")->required();

  // pca
  auto* pca_cmd = app.add_subcommand("pca", "reduce key dimensionality; writes the store and <out>/pca.bin");
  std::string pca_ds, pca_out;
  std::size_t pca_dim = 16;
  PcaOptions pca_opts;
  pca_cmd->add_option("--datastore", pca_ds)->required()->check(CLI::ExistingDirectory);
  pca_cmd->add_option("--dim", pca_dim, "output dimension d'");
  pca_cmd->add_option("--seed", pca_opts.seed);
  pca_cmd->add_option("--out", pca_out, "output datastore directory")->required();

  // prune
  auto* prune_cmd = app.add_subcommand("prune", "compress a datastore");
  std::string prune_ds, prune_out, prune_method = "margin", prune_model, prune_corpus;
  std::size_t prune_rank = 1;
  RedundancyOptions red_opts;
  double red_threshold = -1.0;
  prune_cmd->add_option("--datastore", prune_ds)->required()->check(CLI::ExistingDirectory);
  prune_cmd->add_option("--method", prune_method, "margin | redundant")
      ->check(CLI::IsMember({"margin", "redundant"}));
  prune_cmd->add_option("--model", prune_model, "model (margin)")->check(CLI::ExistingFile);
  prune_cmd->add_option("--corpus", prune_corpus, "corpus the store was built from (margin)")
      ->check(CLI::ExistingFile);
  prune_cmd->add_option("--rank", prune_rank, "drop entries whose value ranks below r (margin)");
  prune_cmd->add_option("--neighbors", red_opts.neighbors, "k_p (redundant)");
  prune_cmd->add_option("--threshold", red_threshold, "distance threshold (redundant; median NN distance if unset)");
  prune_cmd->add_option("--seed", red_opts.seed);
  prune_cmd->add_option("--out", prune_out, "output datastore directory")->required();

  // corrupt
  auto* corrupt_cmd = app.add_subcommand("corrupt", "relabel a fraction of entries with random tokens");
  std::string corrupt_ds, corrupt_model, corrupt_out;
  double corrupt_fraction = 0.5;
  std::uint64_t corrupt_seed = 1;
  corrupt_cmd->add_option("--datastore", corrupt_ds)->required()->check(CLI::ExistingDirectory);
  corrupt_cmd->add_option("--model", corrupt_model)->required()->check(CLI::ExistingFile);
  corrupt_cmd->add_option("--fraction", corrupt_fraction);
  corrupt_cmd->add_option("--seed", corrupt_seed);
  corrupt_cmd->add_option("--out", corrupt_out, "output datastore directory")->required();

  // train-combiner
  auto* tc_cmd = app.add_subcommand("train-combiner", "train the adaptive combiner's meta network");
  PipelineFlags tc_flags;
  std::string tc_heldout, tc_out;
  MetaNetTrainOptions tc_opts;
  std::size_t tc_hidden = 32;
  tc_flags.attach(tc_cmd);
  tc_cmd->add_option("--heldout", tc_heldout, "held-out corpus (TSV)")->required()->check(CLI::ExistingFile);
  tc_cmd->add_option("--epochs", tc_opts.epochs);
  tc_cmd->add_option("--lr", tc_opts.lr);
  tc_cmd->add_option("--batch", tc_opts.batch);
  tc_cmd->add_option("--hidden", tc_hidden);
  tc_cmd->add_option("--seed", tc_opts.seed);
  tc_cmd->add_option("--out", tc_out, "meta network checkpoint")->required();

  // translate
  auto* tr_cmd = app.add_subcommand("translate", "decode source sentences (from --text or stdin)");
  PipelineFlags tr_flags;
  std::vector<std::string> tr_text;
  bool tr_trace = false, tr_verbose = false;
  tr_flags.attach(tr_cmd);
  tr_cmd->add_option("--text", tr_text, "source sentence(s); stdin lines when absent");
  tr_cmd->add_flag("--trace", tr_trace, "include per-step traces");
  tr_cmd->add_flag("--verbose", tr_verbose, "full distributions in traces");

  // eval
  auto* ev_cmd = app.add_subcommand("eval", "evaluate on a test corpus");
  PipelineFlags ev_flags;
  std::string ev_test, ev_mode = "teacher_forced";
  std::size_t ev_threads = 1;
  ev_flags.attach(ev_cmd);
  ev_cmd->add_option("--test", ev_test, "test corpus (TSV)")->required()->check(CLI::ExistingFile);
  ev_cmd->add_option("--mode", ev_mode, "teacher_forced | free_running");
  ev_cmd->add_option("--threads", ev_threads);

  // serve
  auto* sv_cmd = app.add_subcommand("serve", "run the trace HTTP service");
  PipelineFlags sv_flags;
  std::string sv_host = "127.0.0.1", sv_corpus;
  int sv_port = 8080;
  sv_flags.attach(sv_cmd);
  sv_cmd->add_option("--host", sv_host);
  sv_cmd->add_option("--port", sv_port);
  sv_cmd->add_option("--corpus", sv_corpus, "datastore corpus (TSV), for provenance text")
      ->check(CLI::ExistingFile);

  // Accepted everywhere for uniform scripting; these commands are deterministic.
  std::uint64_t unused_seed = 0;
  for (auto* cmd : {build_cmd, tr_cmd, ev_cmd, sv_cmd}) {
    cmd->add_option("--seed", unused_seed, "ignored");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code == 0) return 0;
    const auto parsed = app.get_subcommands();
    std::cerr << (parsed.empty() ? app.help() : parsed.back()->help());
    return 2;
  }

  if (*toy_cmd) {
    auto corpus = make_toy_corpus(toy_opts);
    fs::create_directories(toy_out);
    json files = json::object();
    for (auto [name, split] : {std::pair{"train", &corpus.train}, std::pair{"datastore", &corpus.datastore},
                               std::pair{"heldout", &corpus.heldout}, std::pair{"test", &corpus.test}}) {
      auto path = fs::path(toy_out) / (std::string(name) + ".tsv");
      write_tsv(path, *split);
      files[name] = {{"path", path.string()}, {"pairs", split->size()}};
    }
    emit({{"command", "toy-corpus"}, {"seed", toy_opts.seed}, {"files", files}});
  } else if (*train_cmd) {
    auto raw = read_tsv(train_tsv);
    auto all = raw;
    for (const auto& p : vocab_tsvs) {
      auto extra = read_tsv(p);
      all.insert(all.end(), extra.begin(), extra.end());
    }
    auto vocab = build_vocab(all, max_vocab);
    auto corpus = ParallelCorpus::encode(fs::path(train_tsv).stem().string(), raw, vocab);
    auto model = BaseModel::initialize(vocab, dim, window, train_opts.seed);
    auto report = train(model, corpus, train_opts);
    model.save(train_out);
    emit({{"command", "train-base"},
          {"out", train_out},
          {"vocab_size", model.vocab_size()},
          {"dim", dim},
          {"window", window},
          {"epochs", train_opts.epochs},
          {"initial_loss", report.initial_loss},
          {"final_loss", report.final_loss},
          {"model_fp", hex64(model.fingerprint())}});
  } else if (*build_cmd) {
    auto model = BaseModel::load(build_model);
    auto corpus = load_corpus(build_corpus, model.vocab());
    auto ds = build_datastore(model, corpus);
    ds.save(build_out);
    emit({{"command", "build"}, {"out", build_out}, {"meta", ds.meta_json()}, {"fingerprint", hex64(ds.fingerprint())}});
  } else if (*ivf_cmd) {
    auto ds = Datastore::load(ivf_ds);
    std::vector<double> objective;
    auto index = build_ivf(ds, ivf_opts, &objective);
    index.save(ivf_out);
    emit({{"command", "ivf"},
          {"out", ivf_out},
          {"clusters", index.clusters()},
          {"nprobe", index.nprobe()},
          {"objective", objective}});
  } else if (*pca_cmd) {
    auto ds = Datastore::load(pca_ds);
    auto pca = fit_pca(ds, pca_dim, pca_opts);
    auto reduced = apply_pca(ds, pca);
    reduced.save(pca_out);
    auto pca_path = fs::path(pca_out) / "pca.bin";
    pca.save(pca_path);
    emit({{"command", "pca"},
          {"out", pca_out},
          {"pca", pca_path.string()},
          {"explained_variance_ratio", pca.explained_variance_ratio()},
          {"meta", reduced.meta_json()}});
  } else if (*prune_cmd) {
    auto ds = Datastore::load(prune_ds);
    std::optional<std::pair<Datastore, PruneReport>> result;
    if (prune_method == "margin") {
      if (prune_model.empty() || prune_corpus.empty()) {
        throw InvalidArgument("--method margin needs --model and --corpus");
      }
      auto model = BaseModel::load(prune_model);
      auto corpus = load_corpus(prune_corpus, model.vocab());
      result.emplace(prune_knowledge_margin(ds, model, corpus, prune_rank));
    } else {
      if (red_threshold >= 0.0) red_opts.threshold = red_threshold;
      result.emplace(prune_redundant(ds, red_opts));
    }
    result->first.save(prune_out);
    json j = result->second.to_json();
    j["command"] = "prune";
    j["out"] = prune_out;
    j["n"] = ds.size();
    emit(j);
  } else if (*corrupt_cmd) {
    auto ds = Datastore::load(corrupt_ds);
    auto model = BaseModel::load(corrupt_model);
    ds.check_compatible(model);
    auto noisy = corrupt_values(ds, corrupt_fraction, model.vocab_size(), corrupt_seed);
    noisy.save(corrupt_out);
    emit({{"command", "corrupt"}, {"out", corrupt_out}, {"meta", noisy.meta_json()}});
  } else if (*tc_cmd) {
    auto cfg = tc_flags.config();
    if (!cfg.datastore) throw InvalidArgument("train-combiner needs --datastore");
    cfg.metanet.reset();
    cfg.combiner.variant = CombinerVariant::kBasic;
    auto pipe = Pipeline::load(cfg);
    auto heldout = load_corpus(tc_heldout, pipe.model().vocab());
    Retriever retriever(*pipe.datastore(), pipe.ivf(), pipe.pca(), cfg.nprobe);
    tc_opts.temperature = cfg.combiner.temperature;
    auto net = MetaNet::initialize(cfg.combiner.k, tc_hidden, tc_opts.seed);
    auto report = train_metanet(net, pipe.model(), retriever, heldout, tc_opts);
    net.save(tc_out);
    emit({{"command", "train-combiner"},
          {"out", tc_out},
          {"k", net.k()},
          {"examples", report.examples},
          {"initial_loss", report.initial_loss},
          {"final_loss", report.final_loss}});
  } else if (*tr_cmd) {
    auto cfg = tr_flags.config();
    auto pipe = Pipeline::load(cfg);
    const auto& vocab = pipe.model().vocab();
    auto one = [&](const std::string& text) {
      auto source = vocab.encode(text);
      if (source.empty()) throw InvalidArgument("empty source sentence");
      auto gen = pipe.generate(source, cfg.beam, cfg.max_len, tr_verbose);
      json tokens = json::array();
      for (TokenId id : gen.tokens) tokens.push_back(vocab.surface(id));
      json j{{"command", "translate"},
             {"source", text},
             {"tokens", tokens},
             {"text", vocab.decode(gen.tokens)},
             {"finished", gen.finished},
             {"score", gen.score}};
      if (tr_trace) {
        json steps = json::array();
        for (const auto& st : gen.trace) {
          json nbs = json::array();
          for (const auto& n : st.neighbors.items) {
            nbs.push_back({{"index", n.index}, {"value", vocab.surface(n.value)}, {"distance", n.distance}});
          }
          steps.push_back({{"step", st.step},
                           {"chosen", vocab.surface(st.chosen)},
                           {"p_nmt", st.p_nmt.chosen_prob},
                           {"p_knn", st.p_knn ? json(st.p_knn->chosen_prob) : json(nullptr)},
                           {"p_final", st.p_final.chosen_prob},
                           {"neighbors", nbs}});
        }
        j["trace"] = steps;
      }
      emit(j);
    };
    if (!tr_text.empty()) {
      for (const auto& t : tr_text) one(t);
    } else {
      std::string line;
      while (std::getline(std::cin, line)) {
        if (!split_tokens(line).empty()) one(line);
      }
    }
  } else if (*ev_cmd) {
    auto cfg = ev_flags.config();
    auto pipe = Pipeline::load(cfg);
    auto test = load_corpus(ev_test, pipe.model().vocab());
    auto report = pipe.evaluate(test, parse_eval_mode(ev_mode), cfg.beam, cfg.max_len, ev_threads);
    json j = report.to_json();
    j["command"] = "eval";
    emit(j);
  } else if (*sv_cmd) {
    auto cfg = sv_flags.config();
    auto pipe = Pipeline::load(cfg);
    std::optional<ParallelCorpus> corpus;
    if (!sv_corpus.empty()) corpus = load_corpus(sv_corpus, pipe.model().vocab());
    TraceService service(std::move(pipe), std::move(corpus), {cfg.beam, cfg.max_len});
    httplib::Server server;
    service.install(server);
    if (!server.bind_to_port(sv_host, sv_port)) throw Error("cannot bind " + sv_host + ":" + std::to_string(sv_port));
    emit({{"command", "serve"}, {"host", sv_host}, {"port", sv_port}, {"config", service.config()}});
    server.listen_after_bind();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const InvalidArgument& e) {
    std::cerr << json{{"error", e.what()}, {"kind", "config"}}.dump() << std::endl;
    return 2;
  } catch (const StaleArtifact& e) {
    std::cerr << json{{"error", e.what()}, {"kind", "stale_artifact"}}.dump() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}, {"kind", "runtime"}}.dump() << std::endl;
    return 1;
  }
}
