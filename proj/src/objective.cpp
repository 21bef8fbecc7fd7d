#include "ami/objective.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "ami/lns.hpp"
#include "json.hpp"

namespace ami {

using ad::Var;

void validate(const AmiConfig& config) {
  if (!(config.clip_bound > 0.0)) throw std::invalid_argument("clip_bound must be positive");
  if (config.samples_per_source < 1) throw std::invalid_argument("samples_per_source must be at least 1");
  if (!(config.teacher_forcing_weight >= 0.0)) throw std::invalid_argument("teacher_forcing_weight must be >= 0");
  if (!(config.reward_scale > 0.0)) throw std::invalid_argument("reward_scale must be positive");
  validate(config.sampling);
}

Var mle_loss(const BoundModel& model, const SequencePair& pair) {
  Var lp = log_prob(model, encode(*model.emb.tape, model, pair.source), pair.target);
  return ad::scale(lp, -1.0 / static_cast<double>(pair.target.size() + 1));
}

double mle_loss(const SeqModelParams& params, const SequencePair& pair) {
  ad::Tape tape;
  return mle_loss(bind(tape, params, "", false), pair).item();
}

LossAndGrad mle_loss_grad(const SeqModelParams& params, std::span<const SequencePair> batch) {
  if (batch.empty()) throw std::invalid_argument("mle_loss_grad: empty batch");
  ad::Tape tape;
  BoundModel m = bind(tape, params, "", true);
  Var total = tape.constant(0.0);
  for (const auto& pair : batch) total = total + mle_loss(m, pair);
  Var loss = ad::scale(total, 1.0 / static_cast<double>(batch.size()));
  tape.backward(loss);
  return LossAndGrad{loss.item(), tape.param_grads()};
}

Var score_backward(const BoundModel& backward, const TokenSequence& source, const TokenSequence& target) {
  Var lp = log_prob(backward, encode(*backward.emb.tape, backward, target), source);
  return ad::scale(lp, 1.0 / static_cast<double>(source.size() + 1));
}

double score_backward(const SeqModelParams& backward, const TokenSequence& source, const TokenSequence& target) {
  ad::Tape tape;
  return score_backward(bind(tape, backward, "", false), source, target).item();
}

double bounded_score(double score, double reward_scale) { return std::exp(reward_scale * score); }

double reward_value(double score, const AmiConfig& config) {
  return config.log_reward ? config.reward_scale * score : bounded_score(score, config.reward_scale);
}

Var reward_value(Var score, const AmiConfig& config) {
  Var scaled = ad::scale(score, config.reward_scale);
  return config.log_reward ? scaled : ad::exp(scaled);
}

Multiplier cosine_multiplier(const TokenSequence& t, const TokenSequence& t_prime, const Tensor& embedding) {
  if (t.empty() || t_prime.empty()) throw std::invalid_argument("cosine_multiplier: empty sequence");
  const std::size_t dim = embedding.cols();
  auto mean_vec = [&](const TokenSequence& seq) {
    std::vector<double> v(dim, 0.0);
    for (int id : seq) {
      if (id < 0 || static_cast<std::size_t>(id) >= embedding.rows()) {
        throw std::invalid_argument("cosine_multiplier: token id out of range");
      }
      for (std::size_t j = 0; j < dim; ++j) v[j] += embedding.at(static_cast<std::size_t>(id), j);
    }
    for (double& x : v) x /= static_cast<double>(seq.size());
    return v;
  };
  const auto a = mean_vec(t);
  const auto b = mean_vec(t_prime);
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t j = 0; j < dim; ++j) {
    ab += a[j] * b[j];
    aa += a[j] * a[j];
    bb += b[j] * b[j];
  }
  if (t == t_prime) return Multiplier{0.0, aa == 0.0};
  if (aa == 0.0 || bb == 0.0) return Multiplier{1.0, true};
  const double cos = std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
  return Multiplier{1.0 - cos, false};
}

BaselineState::BaselineState(double decay) : decay_(decay) {
  if (!(decay > 0.0 && decay < 1.0)) throw std::invalid_argument("baseline decay must lie in (0, 1)");
}

void BaselineState::update(double batch_mean) {
  if (!std::isfinite(batch_mean)) return;
  if (!initialized_) {
    value_ = batch_mean;
    initialized_ = true;
  } else {
    value_ = decay_ * value_ + (1.0 - decay_) * batch_mean;
  }
}

std::string StepDiagnostics::to_json() const {
  nlohmann::json j{{"step", step},
                   {"mode", mode},
                   {"reward_mean", reward_mean},
                   {"reward_var", reward_var},
                   {"baseline", baseline},
                   {"k_mean", k_mean},
                   {"clip_saturation", clip_saturation},
                   {"delta_norm_mean", delta_norm_mean},
                   {"skipped", skipped},
                   {"degenerate_k", degenerate_k}};
  return j.dump();
}

void summarize_rewards(StepDiagnostics& d, const std::vector<RewardSample>& samples) {
  if (samples.empty()) return;
  double s = 0.0, s2 = 0.0, k = 0.0;
  for (const auto& r : samples) {
    s += r.signal;
    s2 += r.signal * r.signal;
    k += r.multiplier;
  }
  const double n = static_cast<double>(samples.size());
  d.reward_mean = s / n;
  d.reward_var = std::max(0.0, s2 / n - d.reward_mean * d.reward_mean);
  d.k_mean = k / n;
}

bool score_reward(RewardSample& r, const SequencePair& pair, const SeqModelParams& forward,
                  const SeqModelParams& backward, const AmiConfig& config, StepDiagnostics& diag) {
  if (config.use_multiplier) {
    Multiplier k = cosine_multiplier(pair.target, r.target, forward["emb"]);
    r.multiplier = k.k;
    diag.degenerate_k += k.degenerate ? 1 : 0;
  } else {
    r.multiplier = 1.0;
  }
  try {
    r.score = score_backward(backward, pair.source, r.target);
  } catch (const NumericError&) {
    r.score = std::nan("");
  }
  r.signal = r.multiplier * reward_value(r.score, config);
  return std::isfinite(r.signal);
}

std::vector<std::vector<TokenSequence>> draw_synthetic(const SeqModelParams& forward,
                                                       std::span<const SequencePair> batch, Rng& rng,
                                                       const AmiConfig& config) {
  validate(config);
  std::vector<std::vector<TokenSequence>> out;
  ad::Tape tape;
  BoundModel m = bind(tape, forward, "", false);
  for (const auto& pair : batch) {
    LatentState latent = encode(tape, m, pair.source);
    auto& draws = out.emplace_back();
    for (int k = 0; k < config.samples_per_source; ++k) draws.push_back(sample(m, latent, rng, config.sampling).tokens);
  }
  return out;
}

GradientEstimate reinforce_forward_grad(const SeqModelParams& forward, const SeqModelParams& backward,
                                        std::span<const SequencePair> batch, const NoisePolicy* noise,
                                        BaselineState& baseline, Rng& rng, const AmiConfig& config) {
  validate(config);
  if (batch.empty()) throw std::invalid_argument("reinforce_forward_grad: empty batch");
  GradientEstimate est;
  est.diagnostics.mode = "forward";
  ad::Tape tape;
  BoundModel m = bind(tape, forward, "", true);
  std::vector<Var> log_probs;
  double delta_norm = 0.0;
  int draws = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& pair = batch[i];
    LatentState latent = encode(tape, m, pair.source);
    for (int k = 0; k < config.samples_per_source; ++k) {
      LatentState used = latent;
      if (noise != nullptr) {
        Tensor delta = sample_delta(noise_params(*noise, latent.z.value()), rng);
        double sq = 0.0;
        for (double v : delta.data()) sq += v * v;
        delta_norm += std::sqrt(sq);
        used = perturb(latent, tape.constant(std::move(delta)));
      }
      ++draws;
      SampledSequence s = sample(m, used, rng, config.sampling);
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
  if (!est.samples.empty()) {
    const double n = static_cast<double>(est.samples.size());
    for (std::size_t j = 0; j < est.samples.size(); ++j) {
      objective = objective + ad::scale(log_probs[j], (est.samples[j].signal - b) / n);
    }
  }
  if (config.teacher_forcing_weight > 0.0) {
    const double w = config.teacher_forcing_weight / static_cast<double>(batch.size());
    for (const auto& pair : batch) objective = objective - ad::scale(mle_loss(m, pair), w);
  }
  tape.backward(objective);
  est.grads = tape.param_grads();
  summarize_rewards(est.diagnostics, est.samples);
  est.diagnostics.baseline = b;
  if (draws > 0) est.diagnostics.delta_norm_mean = delta_norm / draws;
  if (!est.samples.empty()) baseline.update(est.diagnostics.reward_mean);
  return est;
}

GradientEstimate backward_ami_grad(const SeqModelParams& forward, const SeqModelParams& backward,
                                   std::span<const SequencePair> batch,
                                   const std::vector<std::vector<TokenSequence>>& synthetic, const AmiConfig& config) {
  validate(config);
  if (batch.empty()) throw std::invalid_argument("backward_ami_grad: empty batch");
  if (synthetic.size() != batch.size()) throw std::invalid_argument("backward_ami_grad: one sample list per pair");
  GradientEstimate est;
  est.diagnostics.mode = "backward";
  ad::Tape tape;
  BoundModel m = bind(tape, backward, "", true);
  const double per_pair = 1.0 / static_cast<double>(batch.size());
  Var objective = tape.constant(0.0);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& pair = batch[i];
    if (synthetic[i].empty()) throw std::invalid_argument("backward_ami_grad: need at least one synthetic sample");
    if (config.real_weight != 0.0) {
      Var q = reward_value(score_backward(m, pair.source, pair.target), config);
      objective = objective + ad::scale(q, config.real_weight * per_pair);
    }
    const double per_sample = per_pair / static_cast<double>(synthetic[i].size());
    for (const auto& t_prime : synthetic[i]) {
      RewardSample r{i, t_prime};
      if (config.use_multiplier) {
        Multiplier k = cosine_multiplier(pair.target, t_prime, forward["emb"]);
        r.multiplier = k.k;
        est.diagnostics.degenerate_k += k.degenerate ? 1 : 0;
      }
      Var score = score_backward(m, pair.source, t_prime);
      r.score = score.item();
      r.signal = r.multiplier * reward_value(r.score, config);
      est.samples.push_back(r);
      if (r.multiplier == 0.0) continue;
      Var q = reward_value(score, config);
      objective = objective - ad::scale(q, r.multiplier * per_sample);
    }
  }
  tape.backward(objective);
  est.grads = tape.param_grads();
  summarize_rewards(est.diagnostics, est.samples);
  return est;
}

MmiGradients mmi_step(const SeqModelParams& forward, const SeqModelParams& backward, std::span<const SequencePair> batch,
                      BaselineState& baseline, Rng& rng, const AmiConfig& config) {
  AmiConfig plain = config;
  plain.use_multiplier = false;
  plain.log_reward = true;
  GradientEstimate fwd = reinforce_forward_grad(forward, backward, batch, nullptr, baseline, rng, plain);

  // An empty draw cannot come out of the masked decoder; the check guards
  // against a future change to the masking.
  ad::Tape tape;
  BoundModel m = bind(tape, backward, "", true);
  Var objective = tape.constant(0.0);
  const auto used = static_cast<std::size_t>(
      std::count_if(fwd.samples.begin(), fwd.samples.end(), [](const RewardSample& r) { return !r.target.empty(); }));
  for (const auto& r : fwd.samples) {
    if (r.target.empty()) continue;
    Var score = score_backward(m, batch[r.pair].source, r.target);
    objective = objective + ad::scale(score, config.reward_scale / static_cast<double>(used));
  }
  tape.backward(objective);
  MmiGradients out{std::move(fwd.grads), tape.param_grads(), fwd.diagnostics};
  out.diagnostics.mode = "mmi";
  out.diagnostics.skipped += static_cast<int>(fwd.samples.size() - used);
  return out;
}

double clip_weights(SeqModelParams& params, double c) {
  if (!(c > 0.0)) throw std::invalid_argument("clip bound must be positive");
  std::size_t total = 0, boundary = 0;
  for (auto& [_, t] : params.tensors) {
    for (double& v : t.data()) {
      v = std::clamp(v, -c, c);
      boundary += (std::abs(v) == c) ? 1 : 0;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(boundary) / static_cast<double>(total);
}

void apply_update(NamedTensors& params, const NamedTensors& grads, double step) {
  for (const auto& [name, g] : grads) {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("apply_update: unknown parameter " + name);
    if (!it->second.same_shape(g)) throw ShapeError("apply_update: shape mismatch for " + name);
    auto dst = it->second.data();
    auto src = g.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += step * src[i];
  }
}

double clip_grad_norm(NamedTensors& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [_, g] : grads) {
    for (double v : g.data()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / norm;
    for (auto& [_, g] : grads) {
      for (double& v : g.data()) v *= f;
    }
  }
  return norm;
}

}  // namespace ami
