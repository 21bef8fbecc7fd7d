#pragma once

#include <span>
#include <string>
#include <vector>

#include "ami/autodiff.hpp"
#include "ami/rng.hpp"
#include "ami/seqmodel.hpp"

namespace ami {

struct NoisePolicy;

struct AmiConfig {
  double clip_bound = 0.01;
  int samples_per_source = 1;
  double teacher_forcing_weight = 1.0;
  double reward_scale = 1.0;
  // Weight of the real-pair term in the backward game. Zero leaves only the
  // synthetic term.
  double real_weight = 1.0;
  // When false K(T') is fixed at 1.
  bool use_multiplier = true;
  // Reward K * reward_scale * score (log domain) instead of the bounded
  // K * exp(reward_scale * score). The mutual-information baseline uses it.
  bool log_reward = false;
  DecodeConfig sampling{8, 1, 1.0};
};

void validate(const AmiConfig& config);

/// Gradients returned by the game estimators are ascent directions: adding
/// lr * g to the parameters increases the respective objective.
struct LossAndGrad {
  double value = 0.0;
  NamedTensors grads;
};

/// Per-token negative log-likelihood -log P(T|S) / (|T| + 1).
ad::Var mle_loss(const BoundModel& model, const SequencePair& pair);
double mle_loss(const SeqModelParams& params, const SequencePair& pair);
/// Loss averaged over the batch and its (descent) gradient.
LossAndGrad mle_loss_grad(const SeqModelParams& params, std::span<const SequencePair> batch);

/// Length-normalised log Q(S|T) of the backward network: log_prob of the
/// source given the target divided by (|S| + 1).
ad::Var score_backward(const BoundModel& backward, const TokenSequence& source, const TokenSequence& target);
double score_backward(const SeqModelParams& backward, const TokenSequence& source, const TokenSequence& target);

/// exp(reward_scale * score), in (0, 1].
double bounded_score(double score, double reward_scale);

/// The per-sample value Q entering the game: bounded_score, or
/// reward_scale * score when config.log_reward is set.
double reward_value(double score, const AmiConfig& config);
ad::Var reward_value(ad::Var score, const AmiConfig& config);

struct Multiplier {
  double k = 1.0;
  bool degenerate = false;  // a sentence embedding had zero norm
};

/// K = 1 - cos between mean token embeddings of the two sequences.
Multiplier cosine_multiplier(const TokenSequence& t, const TokenSequence& t_prime, const Tensor& embedding);

class BaselineState {
 public:
  explicit BaselineState(double decay = 0.9);

  /// Folds one batch mean into the average; the first call sets it directly.
  void update(double batch_mean);
  double value() const noexcept { return initialized_ ? value_ : 0.0; }
  bool initialized() const noexcept { return initialized_; }
  double decay() const noexcept { return decay_; }
  void restore(double value, bool initialized) {
    value_ = value;
    initialized_ = initialized;
  }

 private:
  double decay_;
  double value_ = 0.0;
  bool initialized_ = false;
};

struct RewardSample {
  std::size_t pair = 0;  // index into the batch
  TokenSequence target;
  double log_prob = 0.0;    // under the forward model
  double multiplier = 1.0;  // K(T')
  double score = 0.0;       // log domain, length-normalised
  double signal = 0.0;      // K * reward_value(score)
};

struct StepDiagnostics {
  long step = 0;
  std::string mode;
  double reward_mean = 0.0;
  double reward_var = 0.0;
  double baseline = 0.0;
  double k_mean = 0.0;
  double clip_saturation = 0.0;
  double delta_norm_mean = 0.0;
  int skipped = 0;
  int degenerate_k = 0;

  std::string to_json() const;
};

/// Fills in multiplier, score and signal of a drawn target for `pair`;
/// false when the signal is not finite.
bool score_reward(RewardSample& r, const SequencePair& pair, const SeqModelParams& forward,
                  const SeqModelParams& backward, const AmiConfig& config, StepDiagnostics& diag);

/// Reward mean, variance and mean K over the samples.
void summarize_rewards(StepDiagnostics& d, const std::vector<RewardSample>& samples);

struct GradientEstimate {
  NamedTensors grads;
  std::vector<RewardSample> samples;
  StepDiagnostics diagnostics;
};

/// samples_per_source draws from the forward network per source, using the
/// unperturbed latent.
std::vector<std::vector<TokenSequence>> draw_synthetic(const SeqModelParams& forward,
                                                       std::span<const SequencePair> batch, Rng& rng,
                                                       const AmiConfig& config);

/// REINFORCE estimate for the forward network. Each source gets
/// samples_per_source draws T' ~ P(T'|S, delta) with delta from `noise`
/// (or zero when null); the surrogate is
///   mean (r - b) log P(T'|S, delta) + w_tf * mean log P(T|S) / (|T| + 1)
/// with r = K(T') reward_value(score(S|T')). The baseline is read before and
/// updated after.
GradientEstimate reinforce_forward_grad(const SeqModelParams& forward, const SeqModelParams& backward,
                                        std::span<const SequencePair> batch, const NoisePolicy* noise,
                                        BaselineState& baseline, Rng& rng, const AmiConfig& config);

/// Ascent direction on
///   real_weight * mean Q(S|T) - mean K(T') Q(S|T')
/// for the backward network, with Q = reward_value(score). `synthetic[i]`
/// holds the draws for batch[i].
GradientEstimate backward_ami_grad(const SeqModelParams& forward, const SeqModelParams& backward,
                                   std::span<const SequencePair> batch,
                                   const std::vector<std::vector<TokenSequence>>& synthetic, const AmiConfig& config);

struct MmiGradients {
  NamedTensors forward;
  NamedTensors backward;
  StepDiagnostics diagnostics;
};

/// Maximum-mutual-information step on E[log Q(S|T')]: the forward network
/// gets the REINFORCE estimate with K = 1, log-domain reward and no noise;
/// the backward network ascends reward_scale * score(S|T') on the same
/// draws. No clipping.
MmiGradients mmi_step(const SeqModelParams& forward, const SeqModelParams& backward, std::span<const SequencePair> batch,
                      BaselineState& baseline, Rng& rng, const AmiConfig& config);

/// Clamps every tensor into [-c, c] in place; returns the fraction of
/// coordinates sitting on the box boundary afterwards.
double clip_weights(SeqModelParams& params, double c);

/// params += step * grads for every named gradient.
void apply_update(NamedTensors& params, const NamedTensors& grads, double step);

/// Scales the gradients so their global L2 norm is at most max_norm.
double clip_grad_norm(NamedTensors& grads, double max_norm);

}  // namespace ami
