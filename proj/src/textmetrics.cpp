#include "ami/textmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

namespace ami {

namespace {

using Gram = std::vector<int>;

std::map<Gram, int> count_ngrams(const TokenSequence& seq, int n) {
  std::map<Gram, int> counts;
  const auto len = static_cast<int>(seq.size());
  for (int i = 0; i + n <= len; ++i) counts[Gram(seq.begin() + i, seq.begin() + i + n)]++;
  return counts;
}

std::vector<double> row_of(const Tensor& embedding, int id) {
  if (id < 0 || static_cast<std::size_t>(id) >= embedding.rows()) {
    throw std::invalid_argument("embedding_relevance: token id out of range");
  }
  std::vector<double> v(embedding.cols());
  for (std::size_t j = 0; j < v.size(); ++j) v[j] = embedding.at(static_cast<std::size_t>(id), j);
  return v;
}

// NaN signals a zero-norm operand.
double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    ab += a[j] * b[j];
    aa += a[j] * a[j];
    bb += b[j] * b[j];
  }
  if (aa == 0.0 || bb == 0.0) return std::nan("");
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

std::vector<double> mean_vector(const TokenSequence& seq, const Tensor& embedding) {
  std::vector<double> m(embedding.cols(), 0.0);
  for (int id : seq) {
    auto r = row_of(embedding, id);
    for (std::size_t j = 0; j < m.size(); ++j) m[j] += r[j];
  }
  for (double& x : m) x /= static_cast<double>(seq.size());
  return m;
}

std::vector<double> extrema_vector(const TokenSequence& seq, const Tensor& embedding) {
  std::vector<double> e(embedding.cols(), 0.0);
  for (int id : seq) {
    auto r = row_of(embedding, id);
    for (std::size_t j = 0; j < e.size(); ++j) {
      const double a = std::abs(r[j]), b = std::abs(e[j]);
      if (a > b || (a == b && r[j] > e[j])) e[j] = r[j];
    }
  }
  return e;
}

// Mean over `from` tokens of the best cosine to any `to` token; zero-norm
// tokens are skipped. NaN when nothing is comparable.
double greedy_direction(const TokenSequence& from, const TokenSequence& to, const Tensor& embedding) {
  double total = 0.0;
  int used = 0;
  for (int a : from) {
    const auto va = row_of(embedding, a);
    double best = -2.0;
    for (int b : to) {
      const double c = cosine(va, row_of(embedding, b));
      if (!std::isnan(c)) best = std::max(best, c);
    }
    if (best > -2.0) {
      total += best;
      ++used;
    }
  }
  return used == 0 ? std::nan("") : total / used;
}

}  // namespace

double dist_n(const Corpus& corpus, int n) {
  if (n < 1) throw std::invalid_argument("dist_n: n must be positive");
  std::map<Gram, int> types;
  long total = 0;
  for (const auto& seq : corpus) {
    for (const auto& [g, c] : count_ngrams(seq, n)) {
      types[g] += c;
      total += c;
    }
  }
  if (total == 0) throw std::invalid_argument("dist_n: corpus has no " + std::to_string(n) + "-grams");
  return static_cast<double>(types.size()) / static_cast<double>(total);
}

double ent_4(const Corpus& corpus) {
  std::map<Gram, int> counts;
  long total = 0;
  for (const auto& seq : corpus) {
    for (const auto& [g, c] : count_ngrams(seq, 4)) {
      counts[g] += c;
      total += c;
    }
  }
  if (total == 0) throw std::invalid_argument("ent_4: corpus has no 4-grams");
  double h = 0.0;
  for (const auto& [_, c] : counts) {
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  return h;
}

Relevance embedding_relevance(const TokenSequence& hypothesis, const TokenSequence& reference, const Tensor& embedding) {
  if (hypothesis.empty() || reference.empty()) throw std::invalid_argument("embedding_relevance: empty sentence");
  Relevance r;
  auto settle = [&r](double v) {
    if (std::isnan(v)) {
      ++r.degenerate;
      return 0.0;
    }
    return v;
  };
  r.average = settle(cosine(mean_vector(hypothesis, embedding), mean_vector(reference, embedding)));
  const double fwd = greedy_direction(hypothesis, reference, embedding);
  const double bwd = greedy_direction(reference, hypothesis, embedding);
  r.greedy = settle((std::isnan(fwd) || std::isnan(bwd)) ? std::nan("") : (fwd + bwd) / 2.0);
  r.extrema = settle(cosine(extrema_vector(hypothesis, embedding), extrema_vector(reference, embedding)));
  return r;
}

double bleu(const Corpus& hypotheses, const Corpus& references, int max_n) {
  if (hypotheses.empty()) throw std::invalid_argument("bleu: empty corpus");
  if (hypotheses.size() != references.size()) throw std::invalid_argument("bleu: corpus sizes differ");
  if (max_n < 1) throw std::invalid_argument("bleu: max_n must be positive");
  std::vector<double> matched(static_cast<std::size_t>(max_n), 0.0), possible(static_cast<std::size_t>(max_n), 0.0);
  double hyp_len = 0.0, ref_len = 0.0;
  for (std::size_t k = 0; k < hypotheses.size(); ++k) {
    hyp_len += static_cast<double>(hypotheses[k].size());
    ref_len += static_cast<double>(references[k].size());
    for (int n = 1; n <= max_n; ++n) {
      const auto h = count_ngrams(hypotheses[k], n);
      const auto r = count_ngrams(references[k], n);
      for (const auto& [g, c] : h) {
        auto it = r.find(g);
        matched[static_cast<std::size_t>(n - 1)] += std::min(c, it == r.end() ? 0 : it->second);
        possible[static_cast<std::size_t>(n - 1)] += c;
      }
    }
  }
  if (hyp_len == 0.0) return 0.0;
  if (matched[0] == 0.0) return 0.0;
  double log_sum = 0.0;
  for (int n = 1; n <= max_n; ++n) {
    const auto i = static_cast<std::size_t>(n - 1);
    const double p = n == 1 ? matched[i] / possible[i] : (matched[i] + 1.0) / (possible[i] + 1.0);
    log_sum += std::log(p);
  }
  const double bp = hyp_len < ref_len ? std::exp(1.0 - ref_len / hyp_len) : 1.0;
  return bp * std::exp(log_sum / max_n);
}

MetricsReport compute_metrics(const Corpus& hypotheses, const Corpus& references, const Tensor& embedding) {
  auto or_zero = [](auto f) {
    try {
      return f();
    } catch (const std::invalid_argument&) {
      return 0.0;
    }
  };
  MetricsReport m;
  m.dist1 = or_zero([&] { return dist_n(hypotheses, 1); });
  m.dist2 = or_zero([&] { return dist_n(hypotheses, 2); });
  m.ent4 = or_zero([&] { return ent_4(hypotheses); });
  m.bleu = or_zero([&] { return bleu(hypotheses, references); });
  std::size_t used = 0;
  for (std::size_t k = 0; k < hypotheses.size() && k < references.size(); ++k) {
    if (hypotheses[k].empty() || references[k].empty()) continue;
    Relevance r = embedding_relevance(hypotheses[k], references[k], embedding);
    m.avg_rel += r.average;
    m.greedy_rel += r.greedy;
    m.extrema_rel += r.extrema;
    ++used;
  }
  if (used > 0) {
    m.avg_rel /= static_cast<double>(used);
    m.greedy_rel /= static_cast<double>(used);
    m.extrema_rel /= static_cast<double>(used);
  }
  return m;
}

}  // namespace ami
