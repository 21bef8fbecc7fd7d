#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "ami/autodiff.hpp"
#include "ami/rng.hpp"
#include "ami/tensor.hpp"

namespace ami {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;
inline constexpr int kFirstContent = 4;

/// Token ids of one sentence, without BOS/EOS.
using TokenSequence = std::vector<int>;

struct SequencePair {
  TokenSequence source;
  TokenSequence target;

  friend bool operator==(const SequencePair&, const SequencePair&) = default;
};

/// Bijective token <-> id mapping with the four reserved ids fixed.
class Vocab {
 public:
  Vocab();

  /// Synthetic vocabulary with content tokens named w4, w5, ...
  static Vocab synthetic(int content_tokens);

  int add(const std::string& token);
  int id(const std::string& token) const;  // kUnk when absent
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  int size() const noexcept { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  TokenSequence encode(const std::string& text) const;
  std::string decode(const TokenSequence& ids) const;

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

/// Throws std::invalid_argument unless every id is a content token < vocab_size
/// and the sequence is non-empty.
void validate_sequence(const TokenSequence& seq, int vocab_size);

struct ModelConfig {
  int vocab_size = 0;
  int embed = 32;
  int hidden = 64;
  int max_len = 8;  // longest target (content tokens) log_prob accepts

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Weights of one encoder-decoder network: shared embedding table, a gated
/// recurrent encoder per direction, a bridge from z to the decoder state, a
/// recurrent decoder with dot-product attention, and the vocab projection.
struct SeqModelParams {
  ModelConfig config;
  NamedTensors tensors;

  /// Uniform(-scale, scale) initialisation of every weight.
  static SeqModelParams random(const ModelConfig& config, Rng& rng, double scale = 0.1);
  static SeqModelParams zeros(const ModelConfig& config);

  Tensor& operator[](const std::string& name) { return tensors.at(name); }
  const Tensor& operator[](const std::string& name) const { return tensors.at(name); }
  std::size_t parameter_count() const;
  double max_abs() const;
  bool all_finite() const;
};

/// Parameter names in canonical order.
std::vector<std::string> parameter_names();

struct GruVars {
  ad::Var w, u, bx, bh;
};

/// A SeqModelParams instance placed on a tape, either as named differentiable
/// leaves (prefixed) or as constants.
struct BoundModel {
  ModelConfig config;
  ad::Var emb;
  GruVars enc_fwd, enc_bwd, dec;
  ad::Var bridge_w, bridge_b, att_w, comb_w, comb_b, out_w, out_b;
};

BoundModel bind(ad::Tape& tape, const SeqModelParams& params, const std::string& prefix, bool trainable = true);

/// Encoder output: z (final hidden states of both directions, 2*hidden) and
/// the per-position memory used by attention ([n, 2*hidden]).
struct LatentState {
  ad::Var z;
  ad::Var memory;
};

struct DecodeConfig {
  int max_len = 8;
  int beam_width = 4;
  double temperature = 1.0;
};

void validate(const DecodeConfig& config);

LatentState encode(ad::Tape& tape, const BoundModel& model, const TokenSequence& source);

/// Token ids legal at decoding step `step` (0-based) under a length cap:
/// content tokens at step 0, EOS plus content afterwards, only EOS at the cap.
std::vector<int> legal_tokens(int vocab_size, int step, int max_len);

/// Teacher-forced log P(target, EOS | latent), summed over steps. Targets of
/// exactly `max_len` tokens end with a forced EOS of probability one.
ad::Var log_prob(const BoundModel& model, const LatentState& latent, const TokenSequence& target, int max_len);
ad::Var log_prob(const BoundModel& model, const LatentState& latent, const TokenSequence& target);

struct SampledSequence {
  TokenSequence tokens;
  ad::Var log_prob;  // untempered model log-probability, on the latent's tape
};

SampledSequence sample(const BoundModel& model, const LatentState& latent, Rng& rng, const DecodeConfig& config);

TokenSequence greedy_decode(const BoundModel& model, const LatentState& latent, const DecodeConfig& config);

struct Hypothesis {
  TokenSequence tokens;
  double score = 0.0;
};

/// Beam search over raw summed log-probabilities; returns the best finished
/// hypothesis, ties broken toward lexicographically smaller ids.
Hypothesis beam_decode(const BoundModel& model, const LatentState& latent, const DecodeConfig& config);

// Value-level conveniences that build a private tape.
double log_prob(const SeqModelParams& params, const TokenSequence& source, const TokenSequence& target);
double log_prob(const SeqModelParams& params, const TokenSequence& source, const TokenSequence& target, int max_len);
TokenSequence greedy_decode(const SeqModelParams& params, const TokenSequence& source, const DecodeConfig& config);
Hypothesis beam_decode(const SeqModelParams& params, const TokenSequence& source, const DecodeConfig& config);
Tensor encode_z(const SeqModelParams& params, const TokenSequence& source);

}  // namespace ami
