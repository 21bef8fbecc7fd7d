#pragma once

#include <string>
#include <vector>

#include "ami/seqmodel.hpp"
#include "ami/tensor.hpp"

namespace ami {

using Corpus = std::vector<TokenSequence>;

/// Distinct n-gram types over total n-gram tokens across the corpus.
/// Throws std::invalid_argument when the corpus has no n-gram.
double dist_n(const Corpus& corpus, int n);

/// Shannon entropy (nats) of the empirical 4-gram distribution.
double ent_4(const Corpus& corpus);

struct Relevance {
  double average = 0.0;
  double greedy = 0.0;
  double extrema = 0.0;
  int degenerate = 0;  // metrics that hit a zero-norm vector and were set to 0
};

/// Embedding-based relevance of a hypothesis against a reference:
///  average - cosine of mean token vectors;
///  greedy  - mean over hypothesis tokens of the best cosine to any reference
///            token, averaged with the same quantity in the other direction;
///  extrema - cosine of per-dimension extreme vectors (largest magnitude,
///            positive value on ties).
Relevance embedding_relevance(const TokenSequence& hypothesis, const TokenSequence& reference, const Tensor& embedding);

/// Corpus BLEU with clipped n-gram precisions, add-one smoothing for n >= 2,
/// uniform weights and brevity penalty exp(1 - r/c) when c < r.
double bleu(const Corpus& hypotheses, const Corpus& references, int max_n = 4);

struct MetricsReport {
  double dist1 = 0.0;
  double dist2 = 0.0;
  double ent4 = 0.0;
  double avg_rel = 0.0;
  double greedy_rel = 0.0;
  double extrema_rel = 0.0;
  double bleu = 0.0;
};

/// Full report; metrics without enough n-grams are reported as 0.
MetricsReport compute_metrics(const Corpus& hypotheses, const Corpus& references, const Tensor& embedding);

}  // namespace ami
