#pragma once

#include <functional>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ami/rng.hpp"
#include "ami/seqmodel.hpp"

namespace ami {

struct JointEntry {
  TokenSequence source;
  TokenSequence target;
  double prob = 0.0;
};

/// Finite joint distribution over (source, target) pairs. Marginals are
/// derived from the entries.
struct JointTable {
  std::vector<JointEntry> entries;

  /// Throws std::invalid_argument on negative or non-finite entries, repeated
  /// pairs, or a total that is not 1 within 1e-12.
  void validate() const;
  JointTable transposed() const;
  std::vector<std::pair<TokenSequence, double>> source_marginal() const;
  std::vector<std::pair<TokenSequence, double>> target_marginal() const;
  std::vector<TokenSequence> sources() const;  // support, first-appearance order
};

/// Backward divergence that is infinite because Q puts no mass on a source the
/// posterior supports.
class InfiniteKL : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

using ForwardSampler = std::function<TokenSequence(const TokenSequence& source, Rng& rng)>;
using BackwardLogProb = std::function<double(const TokenSequence& source, const TokenSequence& target)>;

double exact_mi(const JointTable& joint);
double source_entropy(const JointTable& joint);

/// Draws T ~ P(T|S) from the table.
ForwardSampler tabular_forward(const JointTable& joint);
/// log P(S|T) from the table; -inf off the support.
BackwardLogProb tabular_posterior(const JointTable& joint);
/// Wraps a sequence model as Q(S|T) = exp(log_prob(backward, T -> S)).
BackwardLogProb model_backward(const SeqModelParams& backward);
/// Wraps a sequence model as a sampler of P(T|S).
ForwardSampler model_forward(const SeqModelParams& forward, const DecodeConfig& config);

struct BoundEstimate {
  double bound = 0.0;
  double stderr_ = 0.0;
  bool relative = false;  // the H(S) constant was dropped
};

/// Monte Carlo estimate of H(S) + E_{S~P(S)} E_{T~forward(S)} [log Q(S|T)].
/// Without an entropy the constant is dropped and the result is marked
/// relative. Throws std::invalid_argument for fewer than two samples.
BoundEstimate variational_bound(const std::vector<std::pair<TokenSequence, double>>& source_dist,
                                std::optional<double> entropy, const ForwardSampler& forward,
                                const BackwardLogProb& backward, int n_samples, Rng& rng);
/// Sources and H(S) from a table.
BoundEstimate variational_bound(const JointTable& joint, const ForwardSampler& forward,
                                const BackwardLogProb& backward, int n_samples, Rng& rng);
/// Corpus mode: sources drawn uniformly from the pairs, relative bound.
BoundEstimate variational_bound(const std::vector<SequencePair>& pairs, const ForwardSampler& forward,
                                const BackwardLogProb& backward, int n_samples, Rng& rng);

/// Q renormalised over the table's source support for target t.
std::vector<double> renormalized(const JointTable& joint, const BackwardLogProb& backward, const TokenSequence& t);

/// E_{P(S,T)} [log Q~(S|T)] by enumeration, Q~ renormalised over the support.
double expected_log_q(const JointTable& joint, const BackwardLogProb& backward);

/// E_{P(T)} KL(P(S|T) || Q~(S|T)) with Q~ renormalised over the support.
/// Throws InfiniteKL when Q~ gives zero mass to a supported source.
double posterior_kl(const JointTable& joint, const BackwardLogProb& backward);

struct InfoReport {
  double exact_mi = 0.0;
  double bound_estimate = 0.0;
  double bound_stderr = 0.0;
  double posterior_kl = 0.0;
  double source_entropy = 0.0;
};

/// Weighted point set on the real line.
struct Distribution1D {
  std::vector<double> points;
  std::vector<double> probs;
};

/// Earth mover's distance as the area between the two CDFs. Throws
/// std::invalid_argument unless both weight vectors are non-negative and sum
/// to 1 within 1e-9.
double wasserstein_1d(const Distribution1D& p, const Distribution1D& q);

struct BoundRow {
  long step = 0;
  std::string mode;
  double bound = 0.0;
  double stderr_ = 0.0;
  double kl = 0.0;
  double exact_mi = 0.0;
};

void write_bound_csv(std::ostream& out, const std::vector<BoundRow>& rows);

}  // namespace ami
