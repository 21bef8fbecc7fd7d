#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ami/infometrics.hpp"
#include "ami/lns.hpp"
#include "ami/objective.hpp"
#include "ami/seqmodel.hpp"
#include "ami/tasks.hpp"
#include "ami/textmetrics.hpp"

namespace ami {

enum class TrainMode { Mle, Mmi, Ami };

std::string to_string(TrainMode mode);
TrainMode parse_train_mode(const std::string& name);

/// Raised for malformed or inconsistent configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TrainConfig {
  TrainMode mode = TrainMode::Ami;
  std::uint64_t seed = 1;

  // model
  int embed = 8;
  int hidden = 16;
  int max_len = 4;  // decoding cap (content tokens)
  double init_scale = 0.1;

  // data
  std::string data;  // corpus path, resolved relative to the config file
  double valid_fraction = 0.1;
  double test_fraction = 0.0;

  // maximum-likelihood pretraining, plain SGD
  int pretrain_steps = 1500;
  double pretrain_lr = 1.0;
  double lr_decay = 0.95;
  int decay_every = 100;
  double grad_clip = 5.0;
  int batch_size = 16;

  // outer loop and phase lengths
  int outer_iterations = 50;
  int noise_steps = 20;
  int forward_steps = 50;
  int backward_steps = 100;
  double lr_forward = 0.1;
  double lr_backward = 0.1;
  double lr_noise = 0.01;
  int noise_hidden = 8;

  // objective
  double clip_bound = 0.01;
  double lambda = 0.1;
  int samples_per_source = 1;
  double teacher_forcing_weight = 1.0;
  double reward_scale = 1.0;
  double real_weight = 1.0;
  bool use_multiplier = true;
  double baseline_decay = 0.9;

  // evaluation cadence, in outer iterations
  int eval_every = 5;
  int eval_samples = 400;
};

/// Throws ConfigError unless every active setting is usable.
void validate(const TrainConfig& config);

/// "key = value" lines, '#' starts a comment. Unknown keys and bad values
/// raise ConfigError naming the line.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::string& path);
/// Canonical text form; parse_config(to_text(c)) reproduces c.
std::string to_text(const TrainConfig& config);

AmiConfig objective_config(const TrainConfig& config);
ModelConfig model_config(const TrainConfig& config, int vocab_size);

struct TrainState {
  SeqModelParams forward;
  SeqModelParams backward;
  NoisePolicy noise;
  BaselineState forward_baseline;
  BaselineState noise_baseline;
  long outer_iteration = 0;
  long global_step = 0;  // parameter updates across all phases
  Rng rng;
  Vocab vocab;
};

/// Randomly initialised networks and noise policy for a vocabulary.
TrainState init_state(const TrainConfig& config, const Vocab& vocab);

enum class ModelRole { Forward, Backward };

/// Plain SGD on the mean teacher-forced loss with step-decayed learning rate
/// and gradient-norm clipping. The backward role learns T -> S on swapped
/// pairs. Returns the per-step losses.
std::vector<double> pretrain(SeqModelParams& params, ModelRole role, std::span<const SequencePair> pairs,
                             const TrainConfig& config, Rng& rng);

struct Evaluation {
  MetricsReport metrics;
  InfoReport info;
  bool has_exact = false;  // info.exact_mi, posterior_kl, source_entropy valid
  bool relative = true;    // bound without the H(S) constant
  double loss = 0.0;       // mean per-token teacher-forced loss of the forward
  double backward_gap = 0.0;
  std::vector<TokenSequence> hypotheses;
};

/// Greedy outputs on the split, text metrics against its targets, the
/// variational bound with the state's own networks, and the mean of
/// Q(S|T) - K(T, T') Q(S|T') over greedy T'. Uses its own random stream so
/// evaluation never perturbs training. Throws std::invalid_argument on an
/// empty split.
Evaluation evaluate(const TrainState& state, const Dataset& split, const TrainConfig& config, std::uint64_t stream);

struct MetricRow {
  long step = 0;
  double loss = 0.0;
  double bound = 0.0;
  double stderr_ = 0.0;
  double dist1 = 0.0;
  double dist2 = 0.0;
  double ent4 = 0.0;
  double bleu = 0.0;
  double backward_gap = 0.0;
};

MetricRow to_row(long step, const Evaluation& e);
void write_metrics_csv(std::ostream& out, const std::vector<MetricRow>& rows);
std::vector<MetricRow> read_metrics_csv(std::istream& in);

struct TrainResult {
  std::vector<MetricRow> series;
  std::vector<BoundRow> bounds;  // same evaluations; kl and exact_mi are NaN without a joint table
  std::vector<StepDiagnostics> diagnostics;  // last step of every phase
  long clip_checks = 0;
  long clip_violations = 0;
  double max_backward_abs = 0.0;  // over every post-update check in ami mode
};

/// Raised when a phase produces a non-finite value. Carries the state as it
/// was at the start of the failing outer iteration.
class TrainingAborted : public NumericError {
 public:
  TrainingAborted(const std::string& what, TrainState last_good)
      : NumericError(what), last_good_(std::move(last_good)) {}
  const TrainState& last_good() const noexcept { return last_good_; }

 private:
  TrainState last_good_;
};

using IterationHook = std::function<void(const TrainState&)>;

/// Runs outer iterations until state.outer_iteration reaches
/// config.outer_iterations. ami: noise, forward and backward phases with the
/// backward weights clipped after every update; mmi: the same forward and
/// backward phase lengths driven by the joint ascent step, no clipping;
/// mle: forward_steps and backward_steps of likelihood training. The split is
/// evaluated before the first iteration of a fresh state, every eval_every
/// iterations and after the last one.
TrainResult train(TrainState& state, std::span<const SequencePair> train_pairs, const Dataset& eval_split,
                  const TrainConfig& config, const IterationHook& after_iteration = {});

// Binary checkpoint: versioned header, named float64 records, counters,
// baselines, random state, vocabulary and a trailing checksum.
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string serialize(const TrainState& state);
TrainState deserialize(const std::string& bytes);
void save_checkpoint(const TrainState& state, const std::string& path);
TrainState load_checkpoint(const std::string& path);

}  // namespace ami
