#include "ami/lns.hpp"

#include <cmath>
#include <stdexcept>

namespace ami {

using ad::Var;

NoisePolicy NoisePolicy::zeros(int latent_dim, int hidden_noise, double lambda) {
  if (latent_dim < 1 || hidden_noise < 1) throw std::invalid_argument("NoisePolicy: dimensions must be positive");
  if (!(lambda >= 0.0)) throw std::invalid_argument("NoisePolicy: lambda must be >= 0");
  const auto d = static_cast<std::size_t>(latent_dim);
  const auto h = static_cast<std::size_t>(hidden_noise);
  NoisePolicy p;
  p.tensors.emplace("W1", Tensor(Shape{h, d}));
  p.tensors.emplace("b1", Tensor(Shape{h}));
  p.tensors.emplace("W2", Tensor(Shape{d, h}));
  p.lambda = lambda;
  return p;
}

NoisePolicy NoisePolicy::random(int latent_dim, int hidden_noise, Rng& rng, double scale, double lambda) {
  NoisePolicy p = zeros(latent_dim, hidden_noise, lambda);
  for (auto& [_, t] : p.tensors) {
    for (double& v : t.data()) v = rng.uniform(-scale, scale);
  }
  return p;
}

BoundNoise bind(ad::Tape& tape, const NoisePolicy& policy, bool trainable) {
  auto get = [&](const char* name) {
    const Tensor& t = policy.tensors.at(name);
    return trainable ? tape.param(name, t) : tape.constant(t);
  };
  return BoundNoise{get("W1"), get("b1"), get("W2")};
}

NoiseVars noise_params(const BoundNoise& policy, Var z) {
  Var mu = ad::matvec(policy.w2, ad::relu(ad::add(ad::matvec(policy.w1, z), policy.b1)));
  return NoiseVars{mu, ad::softplus(mu)};
}

NoiseParams noise_params(const NoisePolicy& policy, const Tensor& z) {
  if (z.rank() != 1 || z.size() != static_cast<std::size_t>(policy.latent_dim())) {
    throw ShapeError("noise_params: z has shape " + shape_string(z.shape()) + ", policy expects [" +
                     std::to_string(policy.latent_dim()) + "]");
  }
  ad::Tape tape;
  NoiseVars v = noise_params(bind(tape, policy, false), tape.constant(z));
  return NoiseParams{v.mu.value(), v.sigma.value()};
}

Tensor standard_normal(std::size_t n, Rng& rng) {
  Tensor eps(Shape{n});
  for (double& v : eps.data()) v = rng.normal();
  return eps;
}

Tensor sample_delta(const NoiseParams& params, Rng& rng) {
  if (!params.mu.same_shape(params.sigma)) throw ShapeError("sample_delta: mu and sigma differ in shape");
  Tensor delta = params.mu;
  auto d = delta.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    // softplus underflows to 0 below about -745; that is a point mass, not an error
    if (!(params.sigma[i] >= 0.0) || !std::isfinite(params.sigma[i])) {
      throw std::invalid_argument("sample_delta: sigma must be finite and non-negative");
    }
    d[i] += rng.normal() * params.sigma[i];
  }
  return delta;
}

Var sample_delta(const NoiseVars& params, const Tensor& eps) {
  ad::Tape& tape = *params.mu.tape;
  return ad::add(params.mu, ad::mul(tape.constant(eps), params.sigma));
}

LatentState perturb(const LatentState& latent, Var delta) {
  if (latent.z.shape() != delta.shape()) {
    throw ShapeError("perturb: z has shape " + shape_string(latent.z.shape()) + ", delta " +
                     shape_string(delta.shape()));
  }
  return LatentState{ad::add(latent.z, delta), latent.memory};
}

Tensor perturb(const Tensor& z, const Tensor& delta) {
  if (!z.same_shape(delta)) throw ShapeError("perturb: shape mismatch");
  Tensor out = z;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += delta[i];
  return out;
}

GradientEstimate lns_objective_grad(const NoisePolicy& policy, const SeqModelParams& forward,
                                    const SeqModelParams& backward, std::span<const SequencePair> batch,
                                    BaselineState& baseline, Rng& rng, const AmiConfig& config) {
  validate(config);
  if (batch.empty()) throw std::invalid_argument("lns_objective_grad: empty batch");
  if (policy.latent_dim() != 2 * forward.config.hidden) {
    throw ShapeError("lns_objective_grad: policy latent size does not match 2 * hidden");
  }
  GradientEstimate est;
  est.diagnostics.mode = "noise";
  ad::Tape tape;
  BoundNoise p = bind(tape, policy, true);
  BoundModel f = bind(tape, forward, "", false);
  std::vector<Var> log_probs, norms;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& pair = batch[i];
    LatentState latent = encode(tape, f, pair.source);
    NoiseVars nv = noise_params(p, latent.z);
    for (int k = 0; k < config.samples_per_source; ++k) {
      Var delta = sample_delta(nv, standard_normal(latent.z.value().size(), rng));
      norms.push_back(ad::l2norm(delta));
      SampledSequence s = sample(f, perturb(latent, delta), rng, config.sampling);
      RewardSample r{i, s.tokens, s.log_prob.item()};
      if (!score_reward(r, pair, forward, backward, config, est.diagnostics)) {
        ++est.diagnostics.skipped;
        continue;
      }
      est.samples.push_back(std::move(r));
      log_probs.push_back(s.log_prob);
    }
  }
  const double b = baseline.value();
  Var objective = tape.constant(0.0);
  double norm_sum = 0.0;
  for (Var n : norms) {
    norm_sum += n.item();
    objective = objective + ad::scale(n, policy.lambda / static_cast<double>(norms.size()));
  }
  for (std::size_t j = 0; j < est.samples.size(); ++j) {
    objective = objective + ad::scale(log_probs[j], (est.samples[j].signal - b) / static_cast<double>(est.samples.size()));
  }
  tape.backward(objective);
  est.grads = tape.param_grads();
  est.diagnostics.baseline = b;
  est.diagnostics.delta_norm_mean = norm_sum / static_cast<double>(norms.size());
  summarize_rewards(est.diagnostics, est.samples);
  if (!est.samples.empty()) baseline.update(est.diagnostics.reward_mean);
  return est;
}

}  // namespace ami
