#include "knnmt/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "knnmt/rng.hpp"

namespace knnmt {

void ModelWeights::zero() {
  for (auto* t : tensors()) std::fill(t->begin(), t->end(), 0.0);
}

bool ModelWeights::all_finite() const {
  for (const auto* t : tensors()) {
    for (double v : *t) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

BaseModel::BaseModel(Vocab vocab, std::size_t dim, std::size_t window)
    : vocab_(std::move(vocab)), dim_(dim), window_(window) {
  if (dim_ == 0) throw InvalidArgument("model dimension must be positive");
  if (window_ == 0) throw InvalidArgument("context window must be positive");
  const std::size_t V = vocab_.size();
  w_.embedding.assign(V * dim_, 0.0);
  w_.src_proj.assign(dim_ * dim_, 0.0);
  w_.src_bias.assign(dim_, 0.0);
  w_.hidden.assign(dim_ * input_dim(), 0.0);
  w_.hidden_bias.assign(dim_, 0.0);
  w_.output.assign(V * dim_, 0.0);
  w_.output_bias.assign(V, 0.0);
}

BaseModel BaseModel::initialize(Vocab vocab, std::size_t dim, std::size_t window,
                                std::uint64_t seed) {
  BaseModel m(std::move(vocab), dim, window);
  Rng rng(seed);
  auto fill = [&](std::vector<double>& t, double scale) {
    for (double& v : t) v = rng.uniform(-scale, scale);
  };
  fill(m.w_.embedding, 1.0);
  fill(m.w_.src_proj, std::sqrt(3.0 / static_cast<double>(dim)));
  fill(m.w_.hidden, std::sqrt(3.0 / static_cast<double>(m.input_dim())));
  fill(m.w_.output, std::sqrt(3.0 / static_cast<double>(dim)));
  m.round_to_float();
  return m;
}

void BaseModel::check_ids(std::span<const TokenId> ids) const {
  for (TokenId t : ids) {
    if (t >= vocab_.size()) {
      throw InvalidArgument("token id " + std::to_string(t) + " >= vocab size " +
                            std::to_string(vocab_.size()));
    }
  }
}

std::vector<double> BaseModel::source_context(std::span<const TokenId> source) const {
  check_ids(source);
  if (source.empty()) throw InvalidArgument("empty source sequence");
  std::vector<double> mean(dim_, 0.0);
  for (TokenId t : source) {
    const double* e = &w_.embedding[t * dim_];
    for (std::size_t i = 0; i < dim_; ++i) mean[i] += e[i];
  }
  const double inv = 1.0 / static_cast<double>(source.size());
  for (double& v : mean) v *= inv;

  std::vector<double> ctx(w_.src_bias);
  for (std::size_t r = 0; r < dim_; ++r) {
    const double* row = &w_.src_proj[r * dim_];
    double acc = 0.0;
    for (std::size_t c = 0; c < dim_; ++c) acc += row[c] * mean[c];
    ctx[r] += acc;
  }
  return ctx;
}

std::vector<TokenId> BaseModel::window_tokens(std::span<const TokenId> prefix) const {
  std::vector<TokenId> win(window_);
  for (std::size_t j = 0; j < window_; ++j) {
    // j-th most recent token of <pad>... <bos> prefix
    auto back = static_cast<std::ptrdiff_t>(prefix.size()) - 1 - static_cast<std::ptrdiff_t>(j);
    if (back >= 0) {
      win[j] = prefix[static_cast<std::size_t>(back)];
    } else {
      win[j] = back == -1 ? Vocab::kBos : Vocab::kPad;
    }
  }
  return win;
}

void BaseModel::assemble_input(std::span<const double> context, std::span<const TokenId> window,
                               std::span<double> out) const {
  std::copy(context.begin(), context.end(), out.begin());
  for (std::size_t j = 0; j < window_; ++j) {
    const double* e = &w_.embedding[window[j] * dim_];
    std::copy(e, e + dim_, out.begin() + static_cast<std::ptrdiff_t>((1 + j) * dim_));
  }
}

std::vector<double> BaseModel::hidden_state(std::span<const double> context,
                                            std::span<const TokenId> prefix) const {
  check_ids(prefix);
  auto win = window_tokens(prefix);
  std::vector<double> input(input_dim());
  assemble_input(context, win, input);
  std::vector<double> h(dim_);
  const std::size_t in = input_dim();
  for (std::size_t r = 0; r < dim_; ++r) {
    const double* row = &w_.hidden[r * in];
    double acc = w_.hidden_bias[r];
    for (std::size_t c = 0; c < in; ++c) acc += row[c] * input[c];
    h[r] = std::tanh(acc);
  }
  return h;
}

Distribution BaseModel::output_distribution(std::span<const double> hidden) const {
  if (hidden.size() != dim_) throw InvalidArgument("hidden state dimension mismatch");
  const std::size_t V = vocab_.size();
  std::vector<double> logits(w_.output_bias);
  for (std::size_t v = 0; v < V; ++v) {
    const double* row = &w_.output[v * dim_];
    double acc = 0.0;
    for (std::size_t c = 0; c < dim_; ++c) acc += row[c] * hidden[c];
    logits[v] += acc;
  }
  return Distribution::softmax(logits);
}

BaseModel::Step BaseModel::forward_step(std::span<const TokenId> source,
                                        std::span<const TokenId> prefix) const {
  auto ctx = source_context(source);
  auto h = hidden_state(ctx, prefix);
  auto p = output_distribution(h);
  return {std::move(h), std::move(p)};
}

void BaseModel::round_to_float() {
  for (auto* t : w_.tensors()) {
    for (double& v : *t) v = static_cast<double>(static_cast<float>(v));
  }
}

std::vector<std::byte> BaseModel::serialize() const {
  ByteWriter w;
  w.magic(kModelMagic);
  w.u32(static_cast<std::uint32_t>(dim_));
  w.u32(static_cast<std::uint32_t>(window_));
  w.u32(static_cast<std::uint32_t>(vocab_.size()));
  for (const auto* t : w_.tensors()) w.f32s_from(*t);
  vocab_.serialize(w);
  return w.data();
}

BaseModel BaseModel::deserialize(std::span<const std::byte> bytes) {
  ByteReader r(bytes, "model checkpoint");
  r.expect_magic(kModelMagic);
  const std::size_t d = r.u32();
  const std::size_t m = r.u32();
  const std::size_t V = r.u32();
  if (d == 0 || m == 0 || V < Vocab::kNumSpecial) throw FormatError("model checkpoint: bad header");
  std::array<std::vector<double>, ModelWeights::kNumTensors> raw;
  const std::size_t in = (1 + m) * d;
  const std::array<std::size_t, ModelWeights::kNumTensors> sizes{V * d, d * d, d,    d * in,
                                                                 d,     V * d, V};
  for (std::size_t i = 0; i < raw.size(); ++i) raw[i] = r.f32s_as_double(sizes[i]);
  Vocab vocab = Vocab::deserialize(r);
  r.expect_end();
  if (vocab.size() != V) throw FormatError("model checkpoint: vocab size disagrees with header");
  BaseModel model(std::move(vocab), d, m);
  auto tensors = model.w_.tensors();
  for (std::size_t i = 0; i < raw.size(); ++i) *tensors[i] = std::move(raw[i]);
  if (!model.w_.all_finite()) throw FormatError("model checkpoint: non-finite weights");
  return model;
}

void BaseModel::save(const std::filesystem::path& path) const { write_file(path, serialize()); }

BaseModel BaseModel::load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

std::uint64_t BaseModel::fingerprint() const { return fnv1a(serialize()); }

}  // namespace knnmt
