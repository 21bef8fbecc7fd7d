#include "ami/seqmodel.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace ami {

using ad::Var;

// ---------------------------------------------------------------- vocab

Vocab::Vocab() {
  for (const char* t : {"<pad>", "<s>", "</s>", "<unk>"}) add(t);
}

Vocab Vocab::synthetic(int content_tokens) {
  if (content_tokens < 1) throw std::invalid_argument("Vocab::synthetic: need at least one content token");
  Vocab v;
  for (int i = 0; i < content_tokens; ++i) v.add("w" + std::to_string(kFirstContent + i));
  return v;
}

int Vocab::add(const std::string& token) {
  if (auto it = index_.find(token); it != index_.end()) return it->second;
  const int id = size();
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

int Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

TokenSequence Vocab::encode(const std::string& text) const {
  TokenSequence out;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) out.push_back(id(tok));
  return out;
}

std::string Vocab::decode(const TokenSequence& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

void validate_sequence(const TokenSequence& seq, int vocab_size) {
  if (seq.empty()) throw std::invalid_argument("empty token sequence");
  for (int id : seq) {
    if (id < kFirstContent || id >= vocab_size) {
      throw std::invalid_argument("token id " + std::to_string(id) + " outside content range [" +
                                  std::to_string(kFirstContent) + "," + std::to_string(vocab_size) + ")");
    }
  }
}

// ---------------------------------------------------------------- params

namespace {

void validate(const ModelConfig& c) {
  if (c.vocab_size < kFirstContent + 1) throw std::invalid_argument("vocab_size must be at least 5");
  if (c.embed < 1 || c.hidden < 1) throw std::invalid_argument("embed and hidden must be positive");
  if (c.max_len < 1) throw std::invalid_argument("max_len must be positive");
}

NamedTensors shaped_zeros(const ModelConfig& c) {
  const auto v = static_cast<std::size_t>(c.vocab_size);
  const auto e = static_cast<std::size_t>(c.embed);
  const auto h = static_cast<std::size_t>(c.hidden);
  NamedTensors t;
  t.emplace("emb", Tensor(Shape{v, e}));
  for (const char* g : {"enc_f", "enc_b", "dec"}) {
    const std::string p = g;
    t.emplace(p + ".W", Tensor(Shape{3 * h, e}));
    t.emplace(p + ".U", Tensor(Shape{3 * h, h}));
    t.emplace(p + ".bx", Tensor(Shape{3 * h}));
    t.emplace(p + ".bh", Tensor(Shape{3 * h}));
  }
  t.emplace("bridge.W", Tensor(Shape{h, 2 * h}));
  t.emplace("bridge.b", Tensor(Shape{h}));
  t.emplace("att.W", Tensor(Shape{2 * h, h}));
  t.emplace("comb.W", Tensor(Shape{h, 3 * h}));
  t.emplace("comb.b", Tensor(Shape{h}));
  t.emplace("out.W", Tensor(Shape{v, h}));
  t.emplace("out.b", Tensor(Shape{v}));
  return t;
}

}  // namespace

std::vector<std::string> parameter_names() {
  std::vector<std::string> names;
  for (const auto& [name, _] : shaped_zeros(ModelConfig{5, 1, 1, 1})) names.push_back(name);
  return names;
}

SeqModelParams SeqModelParams::zeros(const ModelConfig& config) {
  validate(config);
  return SeqModelParams{config, shaped_zeros(config)};
}

SeqModelParams SeqModelParams::random(const ModelConfig& config, Rng& rng, double scale) {
  SeqModelParams p = zeros(config);
  for (auto& [_, t] : p.tensors) {
    for (double& v : t.data()) v = rng.uniform(-scale, scale);
  }
  return p;
}

std::size_t SeqModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : tensors) n += t.size();
  return n;
}

double SeqModelParams::max_abs() const {
  double m = 0.0;
  for (const auto& [_, t] : tensors)
    for (double v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

bool SeqModelParams::all_finite() const {
  return std::all_of(tensors.begin(), tensors.end(), [](const auto& kv) { return kv.second.all_finite(); });
}

BoundModel bind(ad::Tape& tape, const SeqModelParams& params, const std::string& prefix, bool trainable) {
  auto get = [&](const std::string& name) -> Var {
    const Tensor& t = params.tensors.at(name);
    return trainable ? tape.param(prefix + name, t) : tape.constant(t);
  };
  auto gru = [&](const std::string& p) { return GruVars{get(p + ".W"), get(p + ".U"), get(p + ".bx"), get(p + ".bh")}; };
  BoundModel m;
  m.config = params.config;
  m.emb = get("emb");
  m.enc_fwd = gru("enc_f");
  m.enc_bwd = gru("enc_b");
  m.dec = gru("dec");
  m.bridge_w = get("bridge.W");
  m.bridge_b = get("bridge.b");
  m.att_w = get("att.W");
  m.comb_w = get("comb.W");
  m.comb_b = get("comb.b");
  m.out_w = get("out.W");
  m.out_b = get("out.b");
  return m;
}

void validate(const DecodeConfig& config) {
  if (config.max_len < 2) throw std::invalid_argument("DecodeConfig.max_len must be at least 2");
  if (config.beam_width < 1) throw std::invalid_argument("DecodeConfig.beam_width must be at least 1");
  if (!(config.temperature > 0.0)) throw std::invalid_argument("DecodeConfig.temperature must be positive");
}

// ---------------------------------------------------------------- network

namespace {

Var gru_step(const GruVars& g, Var x, Var h, std::size_t hidden) {
  Var gx = ad::add(ad::matvec(g.w, x), g.bx);
  Var gh = ad::add(ad::matvec(g.u, h), g.bh);
  Var r = ad::sigmoid(ad::add(ad::slice(gx, 0, hidden), ad::slice(gh, 0, hidden)));
  Var u = ad::sigmoid(ad::add(ad::slice(gx, hidden, hidden), ad::slice(gh, hidden, hidden)));
  Var n = ad::tanh(ad::add(ad::slice(gx, 2 * hidden, hidden), ad::mul(r, ad::slice(gh, 2 * hidden, hidden))));
  return ad::add(n, ad::mul(u, ad::sub(h, n)));
}

Var initial_state(const BoundModel& m, const LatentState& latent) {
  return ad::tanh(ad::add(ad::matvec(m.bridge_w, latent.z), m.bridge_b));
}

struct StepOut {
  Var state;
  Var log_probs;  // over the supplied legal tokens, in order
};

StepOut decoder_step(const BoundModel& m, const LatentState& latent, Var state, int prev,
                     const std::vector<int>& legal) {
  const auto hidden = static_cast<std::size_t>(m.config.hidden);
  Var x = ad::row(m.emb, static_cast<std::size_t>(prev));
  Var s = gru_step(m.dec, x, state, hidden);
  Var query = ad::matvec(m.att_w, s);
  Var weights = ad::softmax(ad::matvec(latent.memory, query));
  Var context = ad::matvec_t(latent.memory, weights);
  Var combined = ad::tanh(ad::add(ad::matvec(m.comb_w, ad::concat(s, context)), m.comb_b));
  Var logits = ad::add(ad::matvec(m.out_w, combined), m.out_b);
  std::vector<std::size_t> idx(legal.begin(), legal.end());
  return StepOut{s, ad::log_softmax(ad::gather(logits, std::move(idx)))};
}

std::size_t position_of(const std::vector<int>& legal, int token) {
  auto it = std::find(legal.begin(), legal.end(), token);
  if (it == legal.end()) throw std::invalid_argument("token " + std::to_string(token) + " is not legal here");
  return static_cast<std::size_t>(it - legal.begin());
}

std::size_t argmax_lowest(const Tensor& values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

}  // namespace

LatentState encode(ad::Tape& tape, const BoundModel& model, const TokenSequence& source) {
  validate_sequence(source, model.config.vocab_size);
  const auto hidden = static_cast<std::size_t>(model.config.hidden);
  const std::size_t n = source.size();
  Var zero = tape.constant(Tensor(Shape{hidden}));
  std::vector<Var> fwd(n), bwd(n);
  Var h = zero;
  for (std::size_t t = 0; t < n; ++t) {
    h = gru_step(model.enc_fwd, ad::row(model.emb, static_cast<std::size_t>(source[t])), h, hidden);
    fwd[t] = h;
  }
  h = zero;
  for (std::size_t t = n; t-- > 0;) {
    h = gru_step(model.enc_bwd, ad::row(model.emb, static_cast<std::size_t>(source[t])), h, hidden);
    bwd[t] = h;
  }
  std::vector<Var> rows(n);
  for (std::size_t t = 0; t < n; ++t) rows[t] = ad::concat(fwd[t], bwd[t]);
  return LatentState{ad::concat(fwd[n - 1], bwd[0]), ad::stack(rows)};
}

std::vector<int> legal_tokens(int vocab_size, int step, int max_len) {
  if (step >= max_len) return {kEos};
  std::vector<int> legal;
  if (step > 0) legal.push_back(kEos);
  for (int id = kFirstContent; id < vocab_size; ++id) legal.push_back(id);
  return legal;
}

Var log_prob(const BoundModel& model, const LatentState& latent, const TokenSequence& target, int max_len) {
  validate_sequence(target, model.config.vocab_size);
  if (static_cast<int>(target.size()) > max_len) {
    throw std::invalid_argument("target length " + std::to_string(target.size()) + " exceeds cap " +
                                std::to_string(max_len));
  }
  std::vector<Var> terms;
  Var state = initial_state(model, latent);
  int prev = kBos;
  const int steps = static_cast<int>(target.size());
  for (int t = 0; t <= steps; ++t) {
    const int token = t < steps ? target[static_cast<std::size_t>(t)] : kEos;
    const auto legal = legal_tokens(model.config.vocab_size, t, max_len);
    if (legal.size() == 1) break;  // forced EOS at the cap
    StepOut out = decoder_step(model, latent, state, prev, legal);
    terms.push_back(ad::gather(out.log_probs, {position_of(legal, token)}));
    state = out.state;
    prev = token;
  }
  return ad::sum(ad::concat(terms));
}

Var log_prob(const BoundModel& model, const LatentState& latent, const TokenSequence& target) {
  return log_prob(model, latent, target, model.config.max_len);
}

SampledSequence sample(const BoundModel& model, const LatentState& latent, Rng& rng, const DecodeConfig& config) {
  validate(config);
  std::vector<Var> terms;
  TokenSequence tokens;
  Var state = initial_state(model, latent);
  int prev = kBos;
  for (int t = 0;; ++t) {
    const auto legal = legal_tokens(model.config.vocab_size, t, config.max_len);
    if (legal.size() == 1) break;
    StepOut out = decoder_step(model, latent, state, prev, legal);
    const Tensor& lp = out.log_probs.value();
    const double top = *std::max_element(lp.data().begin(), lp.data().end());
    std::vector<double> weights(lp.size());
    double total = 0.0;
    for (std::size_t i = 0; i < lp.size(); ++i) total += (weights[i] = std::exp((lp[i] - top) / config.temperature));
    const double u = rng.uniform() * total;
    std::size_t choice = 0;
    double acc = weights[0];
    while (acc <= u && choice + 1 < weights.size()) acc += weights[++choice];
    terms.push_back(ad::gather(out.log_probs, {choice}));
    const int token = legal[choice];
    if (token == kEos) break;
    tokens.push_back(token);
    state = out.state;
    prev = token;
  }
  return SampledSequence{std::move(tokens), ad::sum(ad::concat(terms))};
}

TokenSequence greedy_decode(const BoundModel& model, const LatentState& latent, const DecodeConfig& config) {
  validate(config);
  TokenSequence tokens;
  Var state = initial_state(model, latent);
  int prev = kBos;
  for (int t = 0;; ++t) {
    const auto legal = legal_tokens(model.config.vocab_size, t, config.max_len);
    if (legal.size() == 1) break;
    StepOut out = decoder_step(model, latent, state, prev, legal);
    const int token = legal[argmax_lowest(out.log_probs.value())];
    if (token == kEos) break;
    tokens.push_back(token);
    state = out.state;
    prev = token;
  }
  return tokens;
}

Hypothesis beam_decode(const BoundModel& model, const LatentState& latent, const DecodeConfig& config) {
  validate(config);
  struct Beam {
    TokenSequence tokens;  // includes a trailing EOS once finished
    double score;
    Var state;
    bool finished;
  };
  auto better = [](const Beam& a, const Beam& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.tokens < b.tokens;
  };
  const auto width = static_cast<std::size_t>(config.beam_width);
  std::vector<Beam> alive{Beam{{}, 0.0, initial_state(model, latent), false}};
  std::vector<Beam> finished;
  for (int t = 0; !alive.empty(); ++t) {
    const auto legal = legal_tokens(model.config.vocab_size, t, config.max_len);
    std::vector<Beam> candidates;
    for (const Beam& b : alive) {
      if (legal.size() == 1) {
        Beam done = b;
        done.tokens.push_back(kEos);
        done.finished = true;
        candidates.push_back(std::move(done));
        continue;
      }
      const int prev = b.tokens.empty() ? kBos : b.tokens.back();
      StepOut out = decoder_step(model, latent, b.state, prev, legal);
      const Tensor& lp = out.log_probs.value();
      for (std::size_t i = 0; i < legal.size(); ++i) {
        Beam next{b.tokens, b.score + lp[i], out.state, legal[i] == kEos};
        next.tokens.push_back(legal[i]);
        candidates.push_back(std::move(next));
      }
    }
    std::sort(candidates.begin(), candidates.end(), better);
    if (candidates.size() > width) candidates.resize(width);
    alive.clear();
    for (Beam& c : candidates) (c.finished ? finished : alive).push_back(std::move(c));
  }
  std::sort(finished.begin(), finished.end(), better);
  Hypothesis best{finished.front().tokens, finished.front().score};
  best.tokens.pop_back();
  return best;
}

// ---------------------------------------------------------------- value-level

double log_prob(const SeqModelParams& params, const TokenSequence& source, const TokenSequence& target, int max_len) {
  ad::Tape tape;
  BoundModel m = bind(tape, params, "", false);
  return log_prob(m, encode(tape, m, source), target, max_len).item();
}

double log_prob(const SeqModelParams& params, const TokenSequence& source, const TokenSequence& target) {
  return log_prob(params, source, target, params.config.max_len);
}

TokenSequence greedy_decode(const SeqModelParams& params, const TokenSequence& source, const DecodeConfig& config) {
  ad::Tape tape;
  BoundModel m = bind(tape, params, "", false);
  return greedy_decode(m, encode(tape, m, source), config);
}

Hypothesis beam_decode(const SeqModelParams& params, const TokenSequence& source, const DecodeConfig& config) {
  ad::Tape tape;
  BoundModel m = bind(tape, params, "", false);
  return beam_decode(m, encode(tape, m, source), config);
}

Tensor encode_z(const SeqModelParams& params, const TokenSequence& source) {
  ad::Tape tape;
  BoundModel m = bind(tape, params, "", false);
  return encode(tape, m, source).z.value();
}

}  // namespace ami
