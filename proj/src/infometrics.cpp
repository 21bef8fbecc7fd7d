#include "ami/infometrics.hpp"
#include <cstdio>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

namespace ami {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

template <class Key>
std::vector<std::pair<Key, double>> accumulate(const std::vector<JointEntry>& entries,
                                               const Key& (*key)(const JointEntry&)) {
  std::vector<std::pair<Key, double>> out;
  std::map<Key, std::size_t> index;
  for (const auto& e : entries) {
    const Key& k = key(e);
    auto [it, fresh] = index.emplace(k, out.size());
    if (fresh) out.emplace_back(k, 0.0);
    out[it->second].second += e.prob;
  }
  return out;
}

const TokenSequence& source_of(const JointEntry& e) { return e.source; }
const TokenSequence& target_of(const JointEntry& e) { return e.target; }

std::map<TokenSequence, double> as_map(const std::vector<std::pair<TokenSequence, double>>& v) {
  return {v.begin(), v.end()};
}

}  // namespace

void JointTable::validate() const {
  if (entries.empty()) throw std::invalid_argument("JointTable: no entries");
  double total = 0.0;
  std::map<std::pair<TokenSequence, TokenSequence>, int> seen;
  for (const auto& e : entries) {
    if (!(e.prob >= 0.0) || !std::isfinite(e.prob)) throw std::invalid_argument("JointTable: invalid probability");
    if (seen[{e.source, e.target}]++ > 0) throw std::invalid_argument("JointTable: repeated (source, target) pair");
    total += e.prob;
  }
  if (std::abs(total - 1.0) > 1e-12) {
    throw std::invalid_argument("JointTable: probabilities sum to " + std::to_string(total) + ", not 1");
  }
}

JointTable JointTable::transposed() const {
  JointTable t;
  for (const auto& e : entries) t.entries.push_back(JointEntry{e.target, e.source, e.prob});
  return t;
}

std::vector<std::pair<TokenSequence, double>> JointTable::source_marginal() const {
  return accumulate<TokenSequence>(entries, source_of);
}

std::vector<std::pair<TokenSequence, double>> JointTable::target_marginal() const {
  return accumulate<TokenSequence>(entries, target_of);
}

std::vector<TokenSequence> JointTable::sources() const {
  std::vector<TokenSequence> out;
  for (const auto& [s, p] : source_marginal()) {
    if (p > 0.0) out.push_back(s);
  }
  return out;
}

double exact_mi(const JointTable& joint) {
  joint.validate();
  const auto ps = as_map(joint.source_marginal());
  const auto pt = as_map(joint.target_marginal());
  double mi = 0.0;
  for (const auto& e : joint.entries) {
    if (e.prob == 0.0) continue;
    const double a = ps.at(e.source), b = pt.at(e.target);
    if (a == 0.0 || b == 0.0) throw std::invalid_argument("exact_mi: positive joint with a zero marginal");
    mi += e.prob * std::log(e.prob / (a * b));
  }
  // rounding can leave a tiny negative value for independent tables
  return std::max(0.0, mi);
}

double source_entropy(const JointTable& joint) {
  joint.validate();
  double h = 0.0;
  for (const auto& [_, p] : joint.source_marginal()) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

ForwardSampler tabular_forward(const JointTable& joint) {
  joint.validate();
  std::map<TokenSequence, std::vector<std::pair<TokenSequence, double>>> rows;
  for (const auto& e : joint.entries) {
    if (e.prob > 0.0) rows[e.source].emplace_back(e.target, e.prob);
  }
  return [rows = std::move(rows)](const TokenSequence& source, Rng& rng) {
    auto it = rows.find(source);
    if (it == rows.end()) throw std::invalid_argument("tabular_forward: source outside the table");
    double total = 0.0;
    for (const auto& [_, p] : it->second) total += p;
    const double u = rng.uniform() * total;
    double acc = 0.0;
    for (const auto& [t, p] : it->second) {
      acc += p;
      if (u < acc) return t;
    }
    return it->second.back().first;
  };
}

BackwardLogProb tabular_posterior(const JointTable& joint) {
  joint.validate();
  std::map<std::pair<TokenSequence, TokenSequence>, double> cell;
  for (const auto& e : joint.entries) cell[{e.source, e.target}] += e.prob;
  auto pt = as_map(joint.target_marginal());
  return [cell = std::move(cell), pt = std::move(pt)](const TokenSequence& s, const TokenSequence& t) {
    auto c = cell.find({s, t});
    auto m = pt.find(t);
    if (c == cell.end() || m == pt.end() || c->second == 0.0) return kNegInf;
    return std::log(c->second / m->second);
  };
}

BackwardLogProb model_backward(const SeqModelParams& backward) {
  return [&backward](const TokenSequence& s, const TokenSequence& t) { return log_prob(backward, t, s); };
}

ForwardSampler model_forward(const SeqModelParams& forward, const DecodeConfig& config) {
  return [&forward, config](const TokenSequence& s, Rng& rng) {
    ad::Tape tape;
    BoundModel m = bind(tape, forward, "", false);
    return sample(m, encode(tape, m, s), rng, config).tokens;
  };
}

BoundEstimate variational_bound(const std::vector<std::pair<TokenSequence, double>>& source_dist,
                                std::optional<double> entropy, const ForwardSampler& forward,
                                const BackwardLogProb& backward, int n_samples, Rng& rng) {
  if (n_samples < 2) throw std::invalid_argument("variational_bound: need at least two samples");
  if (source_dist.empty()) throw std::invalid_argument("variational_bound: no sources");
  double total = 0.0;
  for (const auto& [_, p] : source_dist) total += p;
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < n_samples; ++i) {
    const double u = rng.uniform() * total;
    double acc = 0.0;
    std::size_t k = 0;
    for (; k + 1 < source_dist.size(); ++k) {
      acc += source_dist[k].second;
      if (u < acc) break;
    }
    const TokenSequence& s = source_dist[k].first;
    const double v = backward(s, forward(s, rng));
    sum += v;
    sum_sq += v * v;
  }
  const double n = n_samples;
  const double mean = sum / n;
  const double var = std::max(0.0, (sum_sq - n * mean * mean) / (n - 1.0));
  return BoundEstimate{mean + entropy.value_or(0.0), std::sqrt(var / n), !entropy.has_value()};
}

BoundEstimate variational_bound(const JointTable& joint, const ForwardSampler& forward,
                                const BackwardLogProb& backward, int n_samples, Rng& rng) {
  return variational_bound(joint.source_marginal(), source_entropy(joint), forward, backward, n_samples, rng);
}

BoundEstimate variational_bound(const std::vector<SequencePair>& pairs, const ForwardSampler& forward,
                                const BackwardLogProb& backward, int n_samples, Rng& rng) {
  std::vector<std::pair<TokenSequence, double>> dist;
  for (const auto& p : pairs) dist.emplace_back(p.source, 1.0);
  return variational_bound(dist, std::nullopt, forward, backward, n_samples, rng);
}

std::vector<double> renormalized(const JointTable& joint, const BackwardLogProb& backward, const TokenSequence& t) {
  const auto support = joint.sources();
  std::vector<double> logq(support.size());
  double top = kNegInf;
  for (std::size_t i = 0; i < support.size(); ++i) top = std::max(top, logq[i] = backward(support[i], t));
  std::vector<double> q(support.size(), 0.0);
  if (top == kNegInf) return q;
  double z = 0.0;
  for (std::size_t i = 0; i < support.size(); ++i) z += (q[i] = std::exp(logq[i] - top));
  for (double& v : q) v /= z;
  return q;
}

namespace {

// For each target, the renormalised Q over the support, keyed by source.
std::map<TokenSequence, std::map<TokenSequence, double>> renormalized_table(const JointTable& joint,
                                                                            const BackwardLogProb& backward) {
  const auto support = joint.sources();
  std::map<TokenSequence, std::map<TokenSequence, double>> out;
  for (const auto& [t, _] : joint.target_marginal()) {
    const auto q = renormalized(joint, backward, t);
    auto& row = out[t];
    for (std::size_t i = 0; i < support.size(); ++i) row[support[i]] = q[i];
  }
  return out;
}

}  // namespace

double expected_log_q(const JointTable& joint, const BackwardLogProb& backward) {
  joint.validate();
  const auto q = renormalized_table(joint, backward);
  double total = 0.0;
  for (const auto& e : joint.entries) {
    if (e.prob == 0.0) continue;
    const double v = q.at(e.target).at(e.source);
    if (v == 0.0) return kNegInf;
    total += e.prob * std::log(v);
  }
  return total;
}

double posterior_kl(const JointTable& joint, const BackwardLogProb& backward) {
  joint.validate();
  const auto q = renormalized_table(joint, backward);
  const auto pt = as_map(joint.target_marginal());
  double kl = 0.0;
  for (const auto& e : joint.entries) {
    if (e.prob == 0.0) continue;
    const double v = q.at(e.target).at(e.source);
    if (v == 0.0) throw InfiniteKL("posterior_kl: backward gives zero mass to a supported source");
    const double post = e.prob / pt.at(e.target);
    kl += e.prob * std::log(post / v);
  }
  return std::max(0.0, kl);
}

double wasserstein_1d(const Distribution1D& p, const Distribution1D& q) {
  for (const auto* d : {&p, &q}) {
    if (d->points.size() != d->probs.size() || d->points.empty()) {
      throw std::invalid_argument("wasserstein_1d: points and probs must be non-empty and the same length");
    }
    double total = 0.0;
    for (double w : d->probs) {
      if (!(w >= 0.0)) throw std::invalid_argument("wasserstein_1d: negative weight");
      total += w;
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("wasserstein_1d: weights must sum to 1");
  }
  // merge both supports and integrate |F_p - F_q| between consecutive points
  std::vector<std::pair<double, double>> events;  // (point, signed mass)
  for (std::size_t i = 0; i < p.points.size(); ++i) events.emplace_back(p.points[i], p.probs[i]);
  for (std::size_t i = 0; i < q.points.size(); ++i) events.emplace_back(q.points[i], -q.probs[i]);
  std::sort(events.begin(), events.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double diff = 0.0, area = 0.0;
  for (std::size_t i = 0; i + 1 < events.size(); ++i) {
    diff += events[i].second;
    area += std::abs(diff) * (events[i + 1].first - events[i].first);
  }
  return area;
}

void write_bound_csv(std::ostream& out, const std::vector<BoundRow>& rows) {
  out << "step,mode,bound,stderr,kl,exact_mi\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%ld,%s,%.10g,%.10g,%.10g,%.10g\n", r.step, r.mode.c_str(), r.bound, r.stderr_, r.kl,
                  r.exact_mi);
    out << buf;
  }
}

}  // namespace ami
