#pragma once

#include <span>

#include "ami/autodiff.hpp"
#include "ami/objective.hpp"
#include "ami/rng.hpp"
#include "ami/seqmodel.hpp"

namespace ami {

/// Latent noise generator: mu = W2 relu(W1 z + b1), sigma = softplus(mu),
/// delta = mu + eps * sigma with eps ~ N(0, I).
struct NoisePolicy {
  NamedTensors tensors;  // "W1" [hn, d], "b1" [hn], "W2" [d, hn]
  double lambda = 0.1;

  static NoisePolicy zeros(int latent_dim, int hidden_noise, double lambda = 0.1);
  static NoisePolicy random(int latent_dim, int hidden_noise, Rng& rng, double scale = 0.1, double lambda = 0.1);

  int latent_dim() const { return static_cast<int>(tensors.at("W2").rows()); }
  int hidden_noise() const { return static_cast<int>(tensors.at("W1").rows()); }
};

struct NoiseParams {
  Tensor mu;
  Tensor sigma;
};

struct NoiseVars {
  ad::Var mu;
  ad::Var sigma;
};

struct BoundNoise {
  ad::Var w1, b1, w2;
};

BoundNoise bind(ad::Tape& tape, const NoisePolicy& policy, bool trainable = true);

NoiseParams noise_params(const NoisePolicy& policy, const Tensor& z);
NoiseVars noise_params(const BoundNoise& policy, ad::Var z);

Tensor sample_delta(const NoiseParams& params, Rng& rng);
/// delta = mu + eps * sigma for a frozen eps.
ad::Var sample_delta(const NoiseVars& params, const Tensor& eps);
Tensor standard_normal(std::size_t n, Rng& rng);

/// Shifts z only; the attention memory is left as is.
LatentState perturb(const LatentState& latent, ad::Var delta);
Tensor perturb(const Tensor& z, const Tensor& delta);

/// Ascent estimate for the policy weights of
///   lambda ||delta|| + E_{T' ~ P(T'|S, z + delta)} [K(T') Q(S|T')]
/// with the networks held fixed. The norm term is differentiated through the
/// reparameterisation; the expectation by REINFORCE, whose log-likelihood
/// depends on the weights through z + delta.
GradientEstimate lns_objective_grad(const NoisePolicy& policy, const SeqModelParams& forward,
                                    const SeqModelParams& backward, std::span<const SequencePair> batch,
                                    BaselineState& baseline, Rng& rng, const AmiConfig& config);

}  // namespace ami
