#include "knnmt/datastore.hpp"

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cmath>
#include <fstream>

namespace knnmt {

namespace fs = std::filesystem;

MappedFile::MappedFile(const fs::path& path) {
  int fd = ::open(path.c_str(), O_RDONLY);
  if (fd < 0) throw Error("cannot open " + path.string());
  struct stat st {};
  if (::fstat(fd, &st) != 0) {
    ::close(fd);
    throw Error("cannot stat " + path.string());
  }
  size_ = static_cast<std::size_t>(st.st_size);
  if (size_ > 0) {
    addr_ = ::mmap(nullptr, size_, PROT_READ, MAP_PRIVATE, fd, 0);
    if (addr_ == MAP_FAILED) {
      addr_ = nullptr;
      ::close(fd);
      throw Error("mmap failed on " + path.string());
    }
  }
  ::close(fd);
}

MappedFile::~MappedFile() {
  if (addr_ != nullptr) ::munmap(addr_, size_);
}

namespace {

struct OwnedKeys {
  std::vector<float> data;
};

std::uint64_t store_fingerprint(std::span<const float> keys, std::span<const TokenId> values) {
  return fnv1a(std::as_bytes(values), fnv1a(std::as_bytes(keys)));
}

}  // namespace

Datastore::Datastore(std::size_t dim, std::vector<float> keys, std::vector<TokenId> values,
                     std::vector<Provenance> provenance, DatastoreMeta meta)
    : dim_(dim), values_(std::move(values)), provenance_(std::move(provenance)),
      meta_(std::move(meta)) {
  auto owned = std::make_shared<OwnedKeys>(OwnedKeys{std::move(keys)});
  keys_ = owned->data;
  key_owner_ = std::move(owned);
  validate();
  fingerprint_ = store_fingerprint(keys_, values_);
}

Datastore::Datastore(std::size_t dim, std::shared_ptr<const void> owner,
                     std::span<const float> keys, std::vector<TokenId> values,
                     std::vector<Provenance> provenance, DatastoreMeta meta)
    : dim_(dim), key_owner_(std::move(owner)), keys_(keys), values_(std::move(values)),
      provenance_(std::move(provenance)), meta_(std::move(meta)) {
  validate();
  fingerprint_ = store_fingerprint(keys_, values_);
}

void Datastore::validate() const {
  if (dim_ == 0) throw InvalidArgument("datastore dimension must be positive");
  if (keys_.size() != values_.size() * dim_) {
    throw FormatError("datastore: " + std::to_string(keys_.size()) + " key floats for " +
                      std::to_string(values_.size()) + " entries of dim " + std::to_string(dim_));
  }
  if (provenance_.size() != values_.size()) {
    throw FormatError("datastore: provenance count disagrees with entry count");
  }
  for (float k : keys_) {
    if (!std::isfinite(k)) throw FormatError("datastore: non-finite key component");
  }
}

double Datastore::scale() const {
  double s = 1.0;
  for (const auto& t : meta_.transforms) {
    if (t.params.contains("scale")) s *= t.params["scale"].get<double>();
  }
  return s;
}

bool Datastore::has_transform(std::string_view kind) const {
  for (const auto& t : meta_.transforms) {
    if (t.kind == kind) return true;
  }
  return false;
}

void Datastore::check_compatible(const BaseModel& model) const {
  if (meta_.vocab_fp != model.vocab().fingerprint()) {
    throw StaleArtifact("datastore vocab fingerprint " + hex64(meta_.vocab_fp) +
                        " does not match model vocab " + hex64(model.vocab().fingerprint()));
  }
  if (meta_.model_fp != model.fingerprint()) {
    throw StaleArtifact("datastore was built with model " + hex64(meta_.model_fp) +
                        ", not " + hex64(model.fingerprint()));
  }
}

Datastore Datastore::subset(std::span<const std::size_t> keep, TransformRecord record) const {
  std::vector<float> keys;
  keys.reserve(keep.size() * dim_);
  std::vector<TokenId> values;
  std::vector<Provenance> prov;
  values.reserve(keep.size());
  prov.reserve(keep.size());
  for (std::size_t i : keep) {
    if (i >= size()) throw InvalidArgument("subset: entry index out of range");
    auto k = key(i);
    keys.insert(keys.end(), k.begin(), k.end());
    values.push_back(values_[i]);
    prov.push_back(provenance_[i]);
  }
  DatastoreMeta meta = meta_;
  meta.transforms.push_back(std::move(record));
  return Datastore(dim_, std::move(keys), std::move(values), std::move(prov), std::move(meta));
}

Datastore Datastore::relabel(std::vector<TokenId> values, TransformRecord record) const {
  if (values.size() != size()) throw InvalidArgument("relabel: value count mismatch");
  DatastoreMeta meta = meta_;
  meta.transforms.push_back(std::move(record));
  return Datastore(dim_, key_owner_, keys_, std::move(values), provenance_, std::move(meta));
}

nlohmann::json Datastore::meta_json() const {
  nlohmann::json transforms = nlohmann::json::array();
  for (const auto& t : meta_.transforms) transforms.push_back({{"kind", t.kind}, {"params", t.params}});
  return {{"n", size()},
          {"dim", dim_},
          {"vocab_fp", hex64(meta_.vocab_fp)},
          {"model_fp", hex64(meta_.model_fp)},
          {"corpus", meta_.corpus},
          {"transforms", transforms}};
}

void Datastore::save(const fs::path& dir) const {
  fs::create_directories(dir);
  write_file(dir / "keys.bin", std::as_bytes(keys_));
  write_file(dir / "values.bin", std::as_bytes(std::span(values_)));
  ByteWriter prov;
  for (const auto& p : provenance_) {
    prov.u32(p.sentence);
    prov.u32(p.position);
  }
  write_file(dir / "prov.bin", prov.data());
  std::ofstream meta(dir / "meta.json", std::ios::trunc);
  if (!meta) throw Error("cannot write " + (dir / "meta.json").string());
  meta << meta_json().dump(2) << '\n';
}

Datastore Datastore::load(const fs::path& dir) {
  std::ifstream meta_in(dir / "meta.json");
  if (!meta_in) throw Error("cannot open " + (dir / "meta.json").string());
  nlohmann::json j;
  try {
    meta_in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("meta.json: " + std::string(e.what()));
  }
  std::size_t n = 0;
  std::size_t dim = 0;
  DatastoreMeta meta;
  try {
    n = j.at("n").get<std::size_t>();
    dim = j.at("dim").get<std::size_t>();
    meta.vocab_fp = parse_hex64(j.at("vocab_fp").get<std::string>());
    meta.model_fp = parse_hex64(j.at("model_fp").get<std::string>());
    meta.corpus = j.at("corpus").get<std::string>();
    for (const auto& t : j.at("transforms")) {
      meta.transforms.push_back({t.at("kind").get<std::string>(), t.at("params")});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("meta.json: " + std::string(e.what()));
  }

  auto check_size = [&](const fs::path& p, std::size_t expected) {
    auto actual = fs::file_size(p);
    if (actual != expected) {
      throw FormatError(p.filename().string() + ": size mismatch, expected " +
                        std::to_string(expected) + " bytes for n=" + std::to_string(n) +
                        ", found " + std::to_string(actual));
    }
  };
  check_size(dir / "keys.bin", n * dim * sizeof(float));
  check_size(dir / "values.bin", n * sizeof(TokenId));
  check_size(dir / "prov.bin", n * 2 * sizeof(std::uint32_t));

  auto raw_values = read_file(dir / "values.bin");
  std::vector<TokenId> values(n);
  std::memcpy(values.data(), raw_values.data(), raw_values.size());
  auto raw_prov = read_file(dir / "prov.bin");
  ByteReader pr(raw_prov, "prov.bin");
  std::vector<Provenance> prov(n);
  for (auto& p : prov) {
    p.sentence = pr.u32();
    p.position = pr.u32();
  }

  auto mapped = std::make_shared<MappedFile>(dir / "keys.bin");
  std::span<const float> keys(reinterpret_cast<const float*>(mapped->bytes().data()), n * dim);
  return Datastore(dim, std::move(mapped), keys, std::move(values), std::move(prov), std::move(meta));
}

Datastore build_datastore(const BaseModel& model, const ParallelCorpus& corpus) {
  if (corpus.empty()) throw InvalidArgument("build_datastore: empty corpus");
  const std::size_t d = model.dim();
  std::vector<float> keys;
  std::vector<TokenId> values;
  std::vector<Provenance> prov;
  const std::size_t n = corpus.target_token_count();
  keys.reserve(n * d);
  values.reserve(n);
  prov.reserve(n);
  for (std::size_t s = 0; s < corpus.size(); ++s) {
    const auto& pair = corpus[s];
    model.check_ids(pair.target);
    auto ctx = model.source_context(pair.source);
    for (std::size_t t = 0; t < pair.target.size(); ++t) {
      auto h = model.hidden_state(ctx, std::span(pair.target).first(t));
      for (double v : h) keys.push_back(static_cast<float>(v));
      values.push_back(pair.target[t]);
      prov.push_back({static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(t)});
    }
  }
  DatastoreMeta meta{model.vocab().fingerprint(), model.fingerprint(), corpus.name(), {}};
  return Datastore(d, std::move(keys), std::move(values), std::move(prov), std::move(meta));
}

}  // namespace knnmt
