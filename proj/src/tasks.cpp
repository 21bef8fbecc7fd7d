#include "ami/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace ami {

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::Copy: return "copy";
    case TaskKind::Reverse: return "reverse";
    case TaskKind::Cipher: return "cipher";
    case TaskKind::BlandMixture: return "bland_mixture";
  }
  return "unknown";
}

TaskKind parse_task_kind(const std::string& name) {
  for (TaskKind k : {TaskKind::Copy, TaskKind::Reverse, TaskKind::Cipher, TaskKind::BlandMixture}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown task kind '" + name + "' (expected copy, reverse, cipher or bland_mixture)");
}

namespace {

// Tokens a source may use.
std::vector<int> source_alphabet(const TaskSpec& spec) {
  std::vector<int> ids;
  const int first = spec.kind == TaskKind::BlandMixture ? kFirstContent + 1 : kFirstContent;
  for (int id = first; id < kFirstContent + spec.content_tokens; ++id) ids.push_back(id);
  return ids;
}

double count_sequences(const TaskSpec& spec) {
  const double a = static_cast<double>(source_alphabet(spec).size());
  double total = 0.0;
  for (int len = spec.min_len; len <= spec.max_len; ++len) total += std::pow(a, len);
  return total;
}

TokenSequence random_source(const TaskSpec& spec, const std::vector<int>& alphabet, Rng& rng) {
  const auto span = static_cast<std::size_t>(spec.max_len - spec.min_len + 1);
  const int len = spec.min_len + static_cast<int>(rng.index(span));
  TokenSequence s(static_cast<std::size_t>(len));
  for (int& id : s) id = alphabet[rng.index(alphabet.size())];
  return s;
}

// Random permutation of the source alphabet, as a lookup over token ids.
std::vector<int> cipher_table(const TaskSpec& spec, Rng& rng) {
  const auto alphabet = source_alphabet(spec);
  std::vector<int> image = alphabet;
  for (std::size_t i = image.size(); i > 1; --i) std::swap(image[i - 1], image[rng.index(i)]);
  std::vector<int> table(static_cast<std::size_t>(kFirstContent + spec.content_tokens), -1);
  for (std::size_t i = 0; i < alphabet.size(); ++i) table[static_cast<std::size_t>(alphabet[i])] = image[i];
  return table;
}

struct Generator {
  TaskSpec spec;
  std::vector<int> alphabet;
  std::vector<int> cipher;
  std::vector<TokenSequence> pool;

  explicit Generator(const TaskSpec& s, Rng& rng) : spec(s), alphabet(source_alphabet(s)) {
    // fixed draw order: pool, then the cipher
    if (spec.n_sources > 0) {
      std::set<TokenSequence> seen;
      while (static_cast<int>(pool.size()) < spec.n_sources) {
        TokenSequence src = random_source(spec, alphabet, rng);
        if (seen.insert(src).second) pool.push_back(std::move(src));
      }
    }
    cipher = cipher_table(spec, rng);
  }

  TokenSequence deterministic_target(const TokenSequence& src) const {
    switch (spec.kind) {
      case TaskKind::Copy: return src;
      case TaskKind::Reverse: return TokenSequence(src.rbegin(), src.rend());
      case TaskKind::Cipher:
      case TaskKind::BlandMixture: {
        TokenSequence t(src.size());
        std::transform(src.begin(), src.end(), t.begin(), [&](int id) { return cipher[static_cast<std::size_t>(id)]; });
        return t;
      }
    }
    return src;
  }

  SequencePair draw(Rng& rng) const {
    TokenSequence src = pool.empty() ? random_source(spec, alphabet, rng) : pool[rng.index(pool.size())];
    if (spec.kind == TaskKind::BlandMixture && rng.uniform() < spec.mixture_p) {
      return SequencePair{std::move(src), TokenSequence{kFirstContent}};
    }
    TokenSequence tgt = deterministic_target(src);
    return SequencePair{std::move(src), std::move(tgt)};
  }

  JointTable table() const {
    if (pool.empty()) throw std::invalid_argument("joint table needs a source pool (n_sources > 0)");
    JointTable j;
    const double ps = 1.0 / static_cast<double>(pool.size());
    for (const auto& src : pool) {
      if (spec.kind == TaskKind::BlandMixture) {
        if (spec.mixture_p > 0.0) j.entries.push_back({src, TokenSequence{kFirstContent}, ps * spec.mixture_p});
        if (spec.mixture_p < 1.0) j.entries.push_back({src, deterministic_target(src), ps * (1.0 - spec.mixture_p)});
      } else {
        j.entries.push_back({src, deterministic_target(src), ps});
      }
    }
    // renormalise away the rounding of 1/n sums
    double total = 0.0;
    for (const auto& e : j.entries) total += e.prob;
    for (auto& e : j.entries) e.prob /= total;
    return j;
  }
};

}  // namespace

void validate(const TaskSpec& spec) {
  const int min_content = spec.kind == TaskKind::BlandMixture ? 3 : 2;
  if (spec.content_tokens < min_content) {
    throw std::invalid_argument("task needs at least " + std::to_string(min_content) + " content tokens");
  }
  if (spec.min_len < 1 || spec.max_len < spec.min_len) throw std::invalid_argument("task lengths must satisfy 1 <= min <= max");
  if (!(spec.mixture_p >= 0.0 && spec.mixture_p <= 1.0)) throw std::invalid_argument("mixture_p must lie in [0, 1]");
  if (spec.n_sources < 0) throw std::invalid_argument("n_sources must be >= 0");
  if (spec.n_sources > 0 && static_cast<double>(spec.n_sources) > count_sequences(spec)) {
    throw std::invalid_argument("n_sources exceeds the number of distinct sources for these lengths");
  }
}

Dataset generate(const TaskSpec& spec, int n_pairs) {
  validate(spec);
  if (n_pairs < 0) throw std::invalid_argument("n_pairs must be >= 0");
  Rng rng(spec.seed);
  Generator gen(spec, rng);
  Dataset d;
  d.vocab = Vocab::synthetic(spec.content_tokens);
  d.pairs.reserve(static_cast<std::size_t>(n_pairs));
  for (int i = 0; i < n_pairs; ++i) d.pairs.push_back(gen.draw(rng));
  if (spec.n_sources > 0) d.joint = gen.table();
  return d;
}

JointTable joint_table(const TaskSpec& spec) {
  validate(spec);
  Rng rng(spec.seed);
  return Generator(spec, rng).table();
}

namespace {

Dataset parse_corpus(const std::string& path, Vocab* grow, const Vocab* fixed) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open corpus " + path);
  Dataset d;
  std::string line;
  int number = 0;
  auto tokens = [&](const std::string& text, int line_no) {
    TokenSequence ids;
    std::istringstream is(text);
    std::string tok;
    while (is >> tok) {
      if (fixed != nullptr) {
        if (!fixed->contains(tok)) {
          throw std::runtime_error(path + ":" + std::to_string(line_no) + ": unknown token '" + tok + "'");
        }
        ids.push_back(fixed->id(tok));
      } else {
        ids.push_back(grow->add(tok));
      }
    }
    return ids;
  };
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw std::runtime_error(path + ":" + std::to_string(number) + ": expected exactly one tab");
    }
    SequencePair p{tokens(line.substr(0, tab), number), tokens(line.substr(tab + 1), number)};
    if (p.source.empty() || p.target.empty()) {
      throw std::runtime_error(path + ":" + std::to_string(number) + ": empty source or target");
    }
    for (const auto* seq : {&p.source, &p.target}) {
      for (int id : *seq) {
        if (id < kFirstContent) {
          throw std::runtime_error(path + ":" + std::to_string(number) + ": reserved token in text");
        }
      }
    }
    d.pairs.push_back(std::move(p));
  }
  if (d.pairs.empty()) throw std::runtime_error("corpus " + path + " is empty");
  return d;
}

}  // namespace

Dataset load_corpus(const std::string& path) {
  Vocab v;
  Dataset d = parse_corpus(path, &v, nullptr);
  d.vocab = std::move(v);
  return d;
}

Dataset load_corpus(const std::string& path, const Vocab& vocab) {
  Dataset d = parse_corpus(path, nullptr, &vocab);
  d.vocab = vocab;
  return d;
}

void write_corpus(const std::string& path, const Dataset& dataset) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus " + path);
  for (const auto& p : dataset.pairs) out << dataset.vocab.decode(p.source) << '\t' << dataset.vocab.decode(p.target) << '\n';
  if (!out) throw std::runtime_error("write failed for " + path);
}

void write_joint(const std::string& path, const JointTable& joint, const Vocab& vocab) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : joint.entries) {
    entries.push_back({{"source", vocab.decode(e.source)}, {"target", vocab.decode(e.target)}, {"prob", e.prob}});
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << nlohmann::json{{"entries", entries}}.dump(1) << '\n';
}

JointTable load_joint(const std::string& path, const Vocab& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
  JointTable t;
  for (const auto& e : j.at("entries")) {
    t.entries.push_back({vocab.encode(e.at("source").get<std::string>()), vocab.encode(e.at("target").get<std::string>()),
                         e.at("prob").get<double>()});
  }
  t.validate();
  return t;
}

Split split(const Dataset& dataset, const std::array<double, 3>& fractions, std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw std::invalid_argument("split: fractions must be non-negative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("split: fractions must sum to 1");
  const std::size_t n = dataset.pairs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
  const auto n_valid = static_cast<std::size_t>(std::floor(static_cast<double>(n) * fractions[1]));
  const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * fractions[2]));
  const std::size_t n_train = n - n_valid - n_test;
  Split s;
  for (Dataset* d : {&s.train, &s.valid, &s.test}) {
    d->vocab = dataset.vocab;
    d->joint = dataset.joint;
  }
  for (std::size_t i = 0; i < n; ++i) {
    Dataset& dst = i < n_train ? s.train : (i < n_train + n_valid ? s.valid : s.test);
    dst.pairs.push_back(dataset.pairs[order[i]]);
  }
  return s;
}

}  // namespace ami
