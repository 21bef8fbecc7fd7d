#include "ami/trainer.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace ami {

std::string to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::Mle: return "mle";
    case TrainMode::Mmi: return "mmi";
    case TrainMode::Ami: return "ami";
  }
  return "unknown";
}

TrainMode parse_train_mode(const std::string& name) {
  for (TrainMode m : {TrainMode::Mle, TrainMode::Mmi, TrainMode::Ami}) {
    if (to_string(m) == name) return m;
  }
  throw ConfigError("unknown mode '" + name + "' (expected mle, mmi or ami)");
}

// ---------------------------------------------------------------- config

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <class T>
T parse_number(const std::string& text) {
  T v{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ConfigError("bad number '" + text + "'");
  return v;
}

bool parse_bool(const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("bad boolean '" + text + "'");
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Field {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <class T>
Field number_field(T TrainConfig::*member) {
  return Field{[member](TrainConfig& c, const std::string& v) { c.*member = parse_number<T>(v); },
               [member](const TrainConfig& c) {
                 if constexpr (std::is_floating_point_v<T>) {
                   return format_double(c.*member);
                 } else {
                   return std::to_string(c.*member);
                 }
               }};
}

// Ordered as written by to_text.
const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"mode", Field{[](TrainConfig& c, const std::string& v) { c.mode = parse_train_mode(v); },
                     [](const TrainConfig& c) { return to_string(c.mode); }}},
      {"seed", number_field(&TrainConfig::seed)},
      {"embed", number_field(&TrainConfig::embed)},
      {"hidden", number_field(&TrainConfig::hidden)},
      {"max_len", number_field(&TrainConfig::max_len)},
      {"init_scale", number_field(&TrainConfig::init_scale)},
      {"data", Field{[](TrainConfig& c, const std::string& v) { c.data = v; },
                     [](const TrainConfig& c) { return c.data; }}},
      {"valid_fraction", number_field(&TrainConfig::valid_fraction)},
      {"test_fraction", number_field(&TrainConfig::test_fraction)},
      {"pretrain_steps", number_field(&TrainConfig::pretrain_steps)},
      {"pretrain_lr", number_field(&TrainConfig::pretrain_lr)},
      {"lr_decay", number_field(&TrainConfig::lr_decay)},
      {"decay_every", number_field(&TrainConfig::decay_every)},
      {"grad_clip", number_field(&TrainConfig::grad_clip)},
      {"batch_size", number_field(&TrainConfig::batch_size)},
      {"outer_iterations", number_field(&TrainConfig::outer_iterations)},
      {"noise_steps", number_field(&TrainConfig::noise_steps)},
      {"forward_steps", number_field(&TrainConfig::forward_steps)},
      {"backward_steps", number_field(&TrainConfig::backward_steps)},
      {"lr_forward", number_field(&TrainConfig::lr_forward)},
      {"lr_backward", number_field(&TrainConfig::lr_backward)},
      {"lr_noise", number_field(&TrainConfig::lr_noise)},
      {"noise_hidden", number_field(&TrainConfig::noise_hidden)},
      {"clip_bound", number_field(&TrainConfig::clip_bound)},
      {"lambda", number_field(&TrainConfig::lambda)},
      {"samples_per_source", number_field(&TrainConfig::samples_per_source)},
      {"teacher_forcing_weight", number_field(&TrainConfig::teacher_forcing_weight)},
      {"reward_scale", number_field(&TrainConfig::reward_scale)},
      {"real_weight", number_field(&TrainConfig::real_weight)},
      {"use_multiplier", Field{[](TrainConfig& c, const std::string& v) { c.use_multiplier = parse_bool(v); },
                               [](const TrainConfig& c) { return std::string(c.use_multiplier ? "true" : "false"); }}},
      {"baseline_decay", number_field(&TrainConfig::baseline_decay)},
      {"eval_every", number_field(&TrainConfig::eval_every)},
      {"eval_samples", number_field(&TrainConfig::eval_samples)},
  };
  return table;
}

}  // namespace

void validate(const TrainConfig& c) {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  need(c.embed >= 1 && c.hidden >= 1, "embed and hidden must be >= 1");
  need(c.max_len >= 1, "max_len must be >= 1");
  need(c.init_scale > 0.0, "init_scale must be positive");
  need(c.valid_fraction >= 0.0 && c.test_fraction >= 0.0 && c.valid_fraction + c.test_fraction < 1.0,
       "valid_fraction + test_fraction must lie in [0, 1)");
  need(c.pretrain_steps >= 0, "pretrain_steps must be >= 0");
  need(c.pretrain_lr >= 0.0, "pretrain_lr must be >= 0");
  need(c.lr_decay > 0.0 && c.lr_decay <= 1.0, "lr_decay must lie in (0, 1]");
  need(c.decay_every >= 1, "decay_every must be >= 1");
  need(c.grad_clip > 0.0, "grad_clip must be positive");
  need(c.batch_size >= 1, "batch_size must be >= 1");
  need(c.outer_iterations >= 0, "outer_iterations must be >= 0");
  need(c.lr_forward >= 0.0 && c.lr_backward >= 0.0 && c.lr_noise >= 0.0, "learning rates must be >= 0");
  need(c.forward_steps >= 1, "forward_steps must be >= 1");
  need(c.mode == TrainMode::Mle || c.backward_steps >= 1, "backward_steps must be >= 1");
  if (c.mode == TrainMode::Ami) {
    need(c.noise_steps >= 1, "noise_steps must be >= 1 in ami mode");
    need(c.clip_bound > 0.0, "ami mode requires clip_bound > 0");
  }
  need(c.noise_hidden >= 1, "noise_hidden must be >= 1");
  need(c.lambda >= 0.0, "lambda must be >= 0");
  need(c.samples_per_source >= 1, "samples_per_source must be >= 1");
  need(c.teacher_forcing_weight >= 0.0, "teacher_forcing_weight must be >= 0");
  need(c.reward_scale > 0.0, "reward_scale must be positive");
  need(c.baseline_decay > 0.0 && c.baseline_decay < 1.0, "baseline_decay must lie in (0, 1)");
  need(c.eval_every >= 1, "eval_every must be >= 1");
  need(c.eval_samples >= 2, "eval_samples must be >= 2");
}

TrainConfig parse_config(const std::string& text) {
  std::map<std::string, const Field*> lookup;
  for (const auto& [k, f] : fields()) lookup[k] = &f;
  TrainConfig c;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(number) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto it = lookup.find(key);
    if (it == lookup.end()) throw ConfigError("line " + std::to_string(number) + ": unknown key '" + key + "'");
    try {
      it->second->set(c, value);
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(number) + " (" + key + "): " + e.what());
    }
  }
  validate(c);
  return c;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string to_text(const TrainConfig& config) {
  std::string out;
  for (const auto& [k, f] : fields()) out += k + " = " + f.get(config) + "\n";
  return out;
}

AmiConfig objective_config(const TrainConfig& c) {
  AmiConfig a;
  a.clip_bound = c.clip_bound;
  a.samples_per_source = c.samples_per_source;
  a.teacher_forcing_weight = c.teacher_forcing_weight;
  a.reward_scale = c.reward_scale;
  a.real_weight = c.real_weight;
  a.use_multiplier = c.use_multiplier;
  a.sampling = DecodeConfig{c.max_len, 1, 1.0};
  return a;
}

ModelConfig model_config(const TrainConfig& c, int vocab_size) { return ModelConfig{vocab_size, c.embed, c.hidden, c.max_len}; }

// ---------------------------------------------------------------- state

TrainState init_state(const TrainConfig& config, const Vocab& vocab) {
  validate(config);
  Rng init(Rng::derive_seed(config.seed, 1));
  TrainState s;
  const ModelConfig mc = model_config(config, vocab.size());
  s.forward = SeqModelParams::random(mc, init, config.init_scale);
  s.backward = SeqModelParams::random(mc, init, config.init_scale);
  s.noise = NoisePolicy::random(2 * config.hidden, config.noise_hidden, init, 0.1, config.lambda);
  s.forward_baseline = BaselineState(config.baseline_decay);
  s.noise_baseline = BaselineState(config.baseline_decay);
  s.rng = Rng(Rng::derive_seed(config.seed, 2));
  s.vocab = vocab;
  return s;
}

namespace {

std::vector<SequencePair> draw_batch(std::span<const SequencePair> pairs, int size, Rng& rng) {
  std::vector<SequencePair> batch;
  batch.reserve(static_cast<std::size_t>(size));
  for (int i = 0; i < size; ++i) batch.push_back(pairs[rng.index(pairs.size())]);
  return batch;
}

std::vector<SequencePair> swapped(std::span<const SequencePair> pairs) {
  std::vector<SequencePair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) out.push_back(SequencePair{p.target, p.source});
  return out;
}

bool finite(const NamedTensors& t) {
  for (const auto& [_, v] : t) {
    for (double x : v.data()) {
      if (!std::isfinite(x)) return false;
    }
  }
  return true;
}

}  // namespace

std::vector<double> pretrain(SeqModelParams& params, ModelRole role, std::span<const SequencePair> pairs,
                             const TrainConfig& config, Rng& rng) {
  if (pairs.empty()) throw std::invalid_argument("pretrain: no training pairs");
  const std::vector<SequencePair> data =
      role == ModelRole::Backward ? swapped(pairs) : std::vector<SequencePair>(pairs.begin(), pairs.end());
  std::vector<double> losses;
  losses.reserve(static_cast<std::size_t>(config.pretrain_steps));
  for (int step = 0; step < config.pretrain_steps; ++step) {
    const double lr = config.pretrain_lr * std::pow(config.lr_decay, step / config.decay_every);
    const auto batch = draw_batch(data, config.batch_size, rng);
    LossAndGrad lg = mle_loss_grad(params, batch);
    if (!std::isfinite(lg.value)) {
      throw NumericError("pretraining diverged at step " + std::to_string(step) + " (loss is not finite)");
    }
    clip_grad_norm(lg.grads, config.grad_clip);
    SeqModelParams next = params;
    apply_update(next.tensors, lg.grads, -lr);
    if (!next.all_finite()) throw NumericError("pretraining produced non-finite weights at step " + std::to_string(step));
    params = std::move(next);
    losses.push_back(lg.value);
  }
  return losses;
}

// ---------------------------------------------------------------- evaluation

Evaluation evaluate(const TrainState& state, const Dataset& split, const TrainConfig& config, std::uint64_t stream) {
  if (split.pairs.empty()) throw std::invalid_argument("evaluate: empty split");
  const DecodeConfig greedy{config.max_len, 1, 1.0};
  Evaluation e;
  Corpus refs;
  const Tensor& emb = state.forward["emb"];
  double gap = 0.0;
  for (const auto& p : split.pairs) {
    TokenSequence hyp = greedy_decode(state.forward, p.source, greedy);
    e.loss += mle_loss(state.forward, p);
    const double q_real = bounded_score(score_backward(state.backward, p.source, p.target), config.reward_scale);
    const double q_syn = bounded_score(score_backward(state.backward, p.source, hyp), config.reward_scale);
    gap += q_real - cosine_multiplier(p.target, hyp, emb).k * q_syn;
    refs.push_back(p.target);
    e.hypotheses.push_back(std::move(hyp));
  }
  const double n = static_cast<double>(split.pairs.size());
  e.loss /= n;
  e.backward_gap = gap / n;
  e.metrics = compute_metrics(e.hypotheses, refs, emb);

  Rng rng(Rng::derive_seed(config.seed, 1000 + stream));
  const ForwardSampler fwd = model_forward(state.forward, DecodeConfig{config.max_len, 1, 1.0});
  const BackwardLogProb bwd = model_backward(state.backward);
  BoundEstimate b;
  if (split.joint) {
    b = variational_bound(*split.joint, fwd, bwd, config.eval_samples, rng);
    e.has_exact = true;
    e.info.exact_mi = exact_mi(*split.joint);
    e.info.source_entropy = source_entropy(*split.joint);
    e.info.posterior_kl = posterior_kl(*split.joint, bwd);
  } else {
    b = variational_bound(split.pairs, fwd, bwd, config.eval_samples, rng);
  }
  e.relative = b.relative;
  e.info.bound_estimate = b.bound;
  e.info.bound_stderr = b.stderr_;
  return e;
}

MetricRow to_row(long step, const Evaluation& e) {
  return MetricRow{step,         e.loss,           e.info.bound_estimate, e.info.bound_stderr, e.metrics.dist1,
                   e.metrics.dist2, e.metrics.ent4, e.metrics.bleu,        e.backward_gap};
}

void write_metrics_csv(std::ostream& out, const std::vector<MetricRow>& rows) {
  out << "step,loss,bound,stderr,dist1,dist2,ent4,bleu,backward_gap\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%ld,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n", r.step, r.loss, r.bound,
                  r.stderr_, r.dist1, r.dist2, r.ent4, r.bleu, r.backward_gap);
    out << buf;
  }
}

std::vector<MetricRow> read_metrics_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || trim(line) != "step,loss,bound,stderr,dist1,dist2,ent4,bleu,backward_gap") {
    throw std::runtime_error("metrics csv: unexpected header");
  }
  std::vector<MetricRow> rows;
  int number = 1;
  while (std::getline(in, line)) {
    ++number;
    if (trim(line).empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
    if (cells.size() != 9) throw std::runtime_error("metrics csv line " + std::to_string(number) + ": expected 9 columns");
    try {
      MetricRow r;
      r.step = std::stol(cells[0]);
      double* dst[] = {&r.loss, &r.bound, &r.stderr_, &r.dist1, &r.dist2, &r.ent4, &r.bleu, &r.backward_gap};
      for (std::size_t i = 0; i < 8; ++i) *dst[i] = std::stod(cells[i + 1]);
      rows.push_back(r);
    } catch (const std::logic_error&) {
      throw std::runtime_error("metrics csv line " + std::to_string(number) + ": bad number");
    }
  }
  return rows;
}

// ---------------------------------------------------------------- training

namespace {

struct Runner {
  TrainState& state;
  std::span<const SequencePair> pairs;
  const TrainConfig& config;
  AmiConfig objective;
  TrainResult& result;

  std::vector<SequencePair> batch() { return draw_batch(pairs, config.batch_size, state.rng); }

  void ascend(NamedTensors& params, NamedTensors grads, double lr, const char* what) {
    if (!finite(grads)) throw NumericError(std::string("non-finite gradient in the ") + what + " phase");
    clip_grad_norm(grads, config.grad_clip);
    apply_update(params, grads, lr);
    if (!finite(params)) throw NumericError(std::string("non-finite weights after the ") + what + " phase");
    ++state.global_step;
  }

  void check_clip() {
    const double m = state.backward.max_abs();
    ++result.clip_checks;
    result.max_backward_abs = std::max(result.max_backward_abs, m);
    if (m > config.clip_bound) ++result.clip_violations;
  }

  void ami_iteration() {
    StepDiagnostics last;
    for (int i = 0; i < config.noise_steps; ++i) {
      GradientEstimate est = lns_objective_grad(state.noise, state.forward, state.backward, batch(),
                                                state.noise_baseline, state.rng, objective);
      ascend(state.noise.tensors, std::move(est.grads), config.lr_noise, "noise");
      last = est.diagnostics;
    }
    finish(last, "noise");
    for (int i = 0; i < config.forward_steps; ++i) {
      GradientEstimate est = reinforce_forward_grad(state.forward, state.backward, batch(), &state.noise,
                                                    state.forward_baseline, state.rng, objective);
      ascend(state.forward.tensors, std::move(est.grads), config.lr_forward, "forward");
      last = est.diagnostics;
    }
    finish(last, "forward");
    for (int i = 0; i < config.backward_steps; ++i) {
      const auto b = batch();
      const auto synthetic = draw_synthetic(state.forward, b, state.rng, objective);
      GradientEstimate est = backward_ami_grad(state.forward, state.backward, b, synthetic, objective);
      ascend(state.backward.tensors, std::move(est.grads), config.lr_backward, "backward");
      est.diagnostics.clip_saturation = clip_weights(state.backward, config.clip_bound);
      check_clip();
      last = est.diagnostics;
    }
    finish(last, "backward");
  }

  // Forward and backward updates on the ami phase grid: step j applies the
  // forward half while j < forward_steps and the backward half while
  // j < backward_steps, both computed from the same parameters.
  void mmi_iteration() {
    StepDiagnostics last;
    const int steps = std::max(config.forward_steps, config.backward_steps);
    for (int j = 0; j < steps; ++j) {
      MmiGradients g = mmi_step(state.forward, state.backward, batch(), state.forward_baseline, state.rng, objective);
      if (j < config.forward_steps) ascend(state.forward.tensors, std::move(g.forward), config.lr_forward, "forward");
      if (j < config.backward_steps) ascend(state.backward.tensors, std::move(g.backward), config.lr_backward, "backward");
      last = g.diagnostics;
    }
    finish(last, "mmi");
  }

  void mle_iteration() {
    StepDiagnostics last;
    for (int i = 0; i < config.forward_steps; ++i) {
      LossAndGrad lg = mle_loss_grad(state.forward, batch());
      if (!std::isfinite(lg.value)) throw NumericError("non-finite likelihood loss");
      ascend(state.forward.tensors, std::move(lg.grads), -config.lr_forward, "forward");
      last.reward_mean = -lg.value;
    }
    finish(last, "mle");
    const std::vector<SequencePair> flipped = swapped(pairs);
    for (int i = 0; i < config.backward_steps; ++i) {
      LossAndGrad lg = mle_loss_grad(state.backward, draw_batch(flipped, config.batch_size, state.rng));
      if (!std::isfinite(lg.value)) throw NumericError("non-finite likelihood loss");
      ascend(state.backward.tensors, std::move(lg.grads), -config.lr_backward, "backward");
    }
  }

  void finish(StepDiagnostics d, const char* mode) {
    d.step = state.global_step;
    d.mode = mode;
    result.diagnostics.push_back(std::move(d));
  }
};

}  // namespace

TrainResult train(TrainState& state, std::span<const SequencePair> train_pairs, const Dataset& eval_split,
                  const TrainConfig& config, const IterationHook& after_iteration) {
  validate(config);
  if (train_pairs.empty()) throw std::invalid_argument("train: no training pairs");
  TrainResult result;
  Runner run{state, train_pairs, config, objective_config(config), result};
  state.noise.lambda = config.lambda;
  if (config.mode == TrainMode::Ami) {
    // the critic enters the game inside the clip box
    clip_weights(state.backward, config.clip_bound);
    run.check_clip();
  }
  auto snapshot = [&] {
    const Evaluation e = evaluate(state, eval_split, config, static_cast<std::uint64_t>(state.outer_iteration));
    const double nan = std::nan("");
    result.series.push_back(to_row(state.outer_iteration, e));
    result.bounds.push_back(BoundRow{state.outer_iteration, to_string(config.mode), e.info.bound_estimate,
                                     e.info.bound_stderr, e.has_exact ? e.info.posterior_kl : nan,
                                     e.has_exact ? e.info.exact_mi : nan});
  };
  if (state.outer_iteration == 0) snapshot();
  while (state.outer_iteration < config.outer_iterations) {
    TrainState last_good = state;
    try {
      switch (config.mode) {
        case TrainMode::Ami: run.ami_iteration(); break;
        case TrainMode::Mmi: run.mmi_iteration(); break;
        case TrainMode::Mle: run.mle_iteration(); break;
      }
    } catch (const NumericError& e) {
      throw TrainingAborted("outer iteration " + std::to_string(state.outer_iteration) + ": " + e.what(),
                            std::move(last_good));
    }
    ++state.outer_iteration;
    if (state.outer_iteration % config.eval_every == 0 || state.outer_iteration == config.outer_iterations) snapshot();
    if (after_iteration) after_iteration(state);
  }
  return result;
}

}  // namespace ami
