#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "knnmt/corpus.hpp"
#include "knnmt/distribution.hpp"
#include "knnmt/vocab.hpp"

namespace knnmt {

// Parameter tensors of the windowed feed-forward decoder, all row-major.
//
//   ctx    = src_proj * mean(embedding[x]) + src_bias                 (d)
//   input  = [ctx; embedding[y_{t-1}]; ...; embedding[y_{t-m}]]       ((1+m)d)
//   h      = tanh(hidden * input + hidden_bias)                       (d)
//   p_nmt  = softmax(output * h + output_bias)                        (V)
//
// Positions before the start of the target read <bos> then <pad>.
struct ModelWeights {
  std::vector<double> embedding;    // V x d
  std::vector<double> src_proj;     // d x d
  std::vector<double> src_bias;     // d
  std::vector<double> hidden;       // d x (1+m)d
  std::vector<double> hidden_bias;  // d
  std::vector<double> output;       // V x d
  std::vector<double> output_bias;  // V

  static constexpr std::size_t kNumTensors = 7;
  static constexpr std::array<std::string_view, kNumTensors> kNames{
      "embedding", "src_proj", "src_bias", "hidden", "hidden_bias", "output", "output_bias"};

  // Fixed serialization order.
  std::array<std::vector<double>*, kNumTensors> tensors() {
    return {&embedding, &src_proj, &src_bias, &hidden, &hidden_bias, &output, &output_bias};
  }
  std::array<const std::vector<double>*, kNumTensors> tensors() const {
    return {&embedding, &src_proj, &src_bias, &hidden, &hidden_bias, &output, &output_bias};
  }

  void zero();
  bool all_finite() const;
};

class BaseModel {
 public:
  struct Step {
    std::vector<double> hidden;
    Distribution probs;
  };

  // All weights zero.
  BaseModel(Vocab vocab, std::size_t dim, std::size_t window);
  // Seeded random init, rounded to float32 so checkpoints round-trip exactly.
  static BaseModel initialize(Vocab vocab, std::size_t dim, std::size_t window, std::uint64_t seed);

  const Vocab& vocab() const { return vocab_; }
  std::size_t vocab_size() const { return vocab_.size(); }
  std::size_t dim() const { return dim_; }
  std::size_t window() const { return window_; }
  std::size_t input_dim() const { return (1 + window_) * dim_; }

  ModelWeights& weights() { return w_; }
  const ModelWeights& weights() const { return w_; }

  Step forward_step(std::span<const TokenId> source, std::span<const TokenId> prefix) const;

  // Decoding reuses the source context across steps.
  std::vector<double> source_context(std::span<const TokenId> source) const;
  std::vector<double> hidden_state(std::span<const double> context,
                                   std::span<const TokenId> prefix) const;
  Distribution output_distribution(std::span<const double> hidden) const;

  // The m most recent target tokens (most recent first), padded with <bos>/<pad>.
  std::vector<TokenId> window_tokens(std::span<const TokenId> prefix) const;
  // Builds the decoder input vector for a given source context and window.
  void assemble_input(std::span<const double> context, std::span<const TokenId> window,
                      std::span<double> out) const;

  void check_ids(std::span<const TokenId> ids) const;

  std::vector<std::byte> serialize() const;
  static BaseModel deserialize(std::span<const std::byte> bytes);
  void save(const std::filesystem::path& path) const;
  static BaseModel load(const std::filesystem::path& path);
  // FNV-1a over the serialized checkpoint.
  std::uint64_t fingerprint() const;

  void round_to_float();

 private:
  Vocab vocab_;
  std::size_t dim_;
  std::size_t window_;
  ModelWeights w_;
};

inline constexpr std::string_view kModelMagic = "KNNBX001";

}  // namespace knnmt
