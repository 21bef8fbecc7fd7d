#include <cmath>
#include <map>

#include "ami/seqmodel.hpp"
#include "doctest.h"

using namespace ami;

namespace {

std::vector<TokenSequence> all_sequences(int vocab_size, int max_len) {
  std::vector<TokenSequence> out;
  std::vector<TokenSequence> frontier{{}};
  for (int len = 1; len <= max_len; ++len) {
    std::vector<TokenSequence> next;
    for (const auto& prefix : frontier) {
      for (int id = kFirstContent; id < vocab_size; ++id) {
        TokenSequence s = prefix;
        s.push_back(id);
        next.push_back(s);
      }
    }
    out.insert(out.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  return out;
}

SeqModelParams tiny_model(std::uint64_t seed, int content = 2, int max_len = 2, double scale = 0.8) {
  Rng rng(seed);
  return SeqModelParams::random(ModelConfig{kFirstContent + content, 3, 4, max_len}, rng, scale);
}

}  // namespace

TEST_CASE("vocab reserves the special ids") {
  Vocab v = Vocab::synthetic(3);
  CHECK(v.size() == 7);
  CHECK(v.token(kPad) == "<pad>");
  CHECK(v.token(kBos) == "<s>");
  CHECK(v.token(kEos) == "</s>");
  CHECK(v.token(kUnk) == "<unk>");
  CHECK(v.id("w5") == 5);
  CHECK(v.id("nope") == kUnk);
  CHECK(v.decode(v.encode("w4 w6")) == "w4 w6");
}

TEST_CASE("encode is deterministic and handles length one") {
  SeqModelParams p = tiny_model(1, 3);
  CHECK(encode_z(p, {4, 5, 6}) == encode_z(p, {4, 5, 6}));
  Tensor z = encode_z(p, {5});
  CHECK(z.size() == 8);
  CHECK(z.all_finite());
}

TEST_CASE("zero weights give the fixed point z = 0 for every source") {
  // With all weights zero each gate is sigmoid(0) = 1/2 and the candidate is
  // tanh(0) = 0, so h' = h/2 from h0 = 0 stays at zero.
  SeqModelParams p = SeqModelParams::zeros(ModelConfig{8, 3, 4, 3});
  for (const TokenSequence& s : {TokenSequence{4}, TokenSequence{5, 6, 7}, TokenSequence{7, 7}}) {
    Tensor z = encode_z(p, s);
    for (double v : z.data()) CHECK(v == 0.0);
  }
}

TEST_CASE("encode rejects out-of-range tokens") {
  SeqModelParams p = tiny_model(2);
  CHECK_THROWS_AS(encode_z(p, {9}), std::invalid_argument);
  CHECK_THROWS_AS(encode_z(p, {kEos}), std::invalid_argument);
  CHECK_THROWS_AS(encode_z(p, {}), std::invalid_argument);
}

TEST_CASE("log_prob is non-positive and rejects overlong targets") {
  SeqModelParams p = tiny_model(3);
  for (const auto& t : all_sequences(p.config.vocab_size, 2)) CHECK(log_prob(p, {4}, t) <= 0.0);
  CHECK_THROWS_AS(log_prob(p, {4}, {4, 4, 4}), std::invalid_argument);
}

TEST_CASE("probability mass over all terminated sequences sums to one") {
  SUBCASE("two content tokens, max length 2") {
    SeqModelParams p = tiny_model(4, 2, 2);
    double total = 0.0;
    for (const auto& t : all_sequences(p.config.vocab_size, 2)) total += std::exp(log_prob(p, {5, 4}, t));
    CHECK(std::abs(total - 1.0) < 1e-9);
  }
  SUBCASE("four content tokens, max length 3") {
    SeqModelParams p = tiny_model(5, 4, 3);
    double total = 0.0;
    for (const auto& t : all_sequences(p.config.vocab_size, 3)) total += std::exp(log_prob(p, {6}, t));
    CHECK(std::abs(total - 1.0) < 1e-9);
  }
}

TEST_CASE("zero logits give uniform steps over the legal tokens") {
  // Legal tokens: the content set at step 0, EOS plus content after.
  SeqModelParams p = SeqModelParams::zeros(ModelConfig{9, 3, 4, 4});
  const double content = 5.0;
  CHECK(log_prob(p, {4}, {6}) == doctest::Approx(-std::log(content) - std::log(content + 1)));
  CHECK(log_prob(p, {4}, {6, 7, 8}) == doctest::Approx(-std::log(content) - 3 * std::log(content + 1)));
  // at the cap EOS is forced
  CHECK(log_prob(p, {4}, {6, 7, 8, 4}) == doctest::Approx(-std::log(content) - 3 * std::log(content + 1)));
}

TEST_CASE("log_prob gradient matches finite differences") {
  // step 1e-4: at 1e-5 roundoff in a ~5 nat value swamps gradients near 1e-7
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    SeqModelParams p = tiny_model(seed + 10, 3, 3, 1.0);
    auto value = [&](const NamedTensors& probe) {
      SeqModelParams q{p.config, probe};
      return log_prob(q, {4, 6, 5, 4}, {5, 5, 6});
    };
    ad::Tape tape;
    BoundModel m = bind(tape, p, "", true);
    ad::Var out = log_prob(m, encode(tape, m, {4, 6, 5, 4}), {5, 5, 6});
    tape.backward(out);
    CHECK(ad::finite_diff_check(value, tape.param_grads(), p.tensors, 1e-4) < 1e-4);
  }
}

TEST_CASE("sampling") {
  SeqModelParams p = tiny_model(6, 2, 2, 1.5);
  DecodeConfig cfg{2, 1, 1.0};

  SUBCASE("fixed seed reproduces the sample") {
    ad::Tape t1, t2;
    BoundModel m1 = bind(t1, p, "", false), m2 = bind(t2, p, "", false);
    Rng r1(9), r2(9);
    auto a = sample(m1, encode(t1, m1, {4}), r1, cfg);
    auto b = sample(m2, encode(t2, m2, {4}), r2, cfg);
    CHECK(a.tokens == b.tokens);
    CHECK(a.log_prob.item() == b.log_prob.item());
  }

  SUBCASE("returned log_prob equals teacher-forced log_prob") {
    Rng rng(11);
    for (int i = 0; i < 50; ++i) {
      ad::Tape tape;
      BoundModel m = bind(tape, p, "", false);
      LatentState latent = encode(tape, m, {5, 4});
      auto s = sample(m, latent, rng, cfg);
      CHECK(s.log_prob.item() == doctest::Approx(log_prob(m, latent, s.tokens, cfg.max_len).item()).epsilon(1e-12));
    }
  }

  SUBCASE("near-zero temperature equals greedy") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      SeqModelParams q = tiny_model(seed + 100, 3, 3, 1.5);
      Rng rng(seed);
      ad::Tape tape;
      BoundModel m = bind(tape, q, "", false);
      LatentState latent = encode(tape, m, {4, 5});
      DecodeConfig c3{3, 1, 1e-4};
      CHECK(sample(m, latent, rng, c3).tokens == greedy_decode(m, latent, c3));
    }
  }

  SUBCASE("empirical frequencies converge to exp(log_prob)") {
    const auto seqs = all_sequences(p.config.vocab_size, 2);
    std::map<TokenSequence, int> counts;
    Rng rng(2024);
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
      ad::Tape tape;
      BoundModel m = bind(tape, p, "", false);
      counts[sample(m, encode(tape, m, {5}), rng, cfg).tokens]++;
    }
    int drawn = 0;
    for (const auto& [_, c] : counts) drawn += c;
    double chi2 = 0.0;
    for (const auto& s : seqs) {
      const double prob = std::exp(log_prob(p, {5}, s, 2));
      const double expected = prob * drawn;
      const double sigma = std::sqrt(drawn * prob * (1 - prob));
      INFO("sequence size " << s.size());
      CHECK(std::abs(counts[s] - expected) <= 3 * sigma);
      chi2 += (counts[s] - expected) * (counts[s] - expected) / expected;
    }
    // 5 degrees of freedom, p = 0.01 critical value
    CHECK(chi2 < 15.086);
  }
}

TEST_CASE("greedy decoding") {
  SUBCASE("zero logits pick the lowest content id then EOS") {
    SeqModelParams p = SeqModelParams::zeros(ModelConfig{8, 3, 4, 4});
    CHECK(greedy_decode(p, {5, 6}, DecodeConfig{4, 1, 1.0}) == TokenSequence{4});
  }
  SUBCASE("beam width one equals greedy") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      SeqModelParams p = tiny_model(seed, 3, 3, 1.5);
      DecodeConfig cfg{3, 1, 1.0};
      CHECK(beam_decode(p, {4, 6}, cfg).tokens == greedy_decode(p, {4, 6}, cfg));
    }
  }
}

TEST_CASE("beam decoding") {
  SUBCASE("best beam scores at least the greedy path") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      SeqModelParams p = tiny_model(seed + 50, 3, 3, 1.5);
      DecodeConfig cfg{3, 3, 1.0};
      const TokenSequence greedy = greedy_decode(p, {5}, cfg);
      CHECK(beam_decode(p, {5}, cfg).score >= log_prob(p, {5}, greedy, 3) - 1e-12);
    }
  }
  SUBCASE("exhaustive width recovers the enumerated argmax") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      SeqModelParams p = tiny_model(seed + 70, 2, 2, 2.0);
      const auto seqs = all_sequences(p.config.vocab_size, 2);
      TokenSequence best;
      double best_lp = -1e300;
      for (const auto& s : seqs) {
        const double lp = log_prob(p, {4, 5}, s, 2);
        if (lp > best_lp) best_lp = lp, best = s;
      }
      Hypothesis h = beam_decode(p, {4, 5}, DecodeConfig{2, 4, 1.0});
      CHECK(h.tokens == best);
      CHECK(h.score == doctest::Approx(best_lp).epsilon(1e-12));
    }
  }
  SUBCASE("invalid configs are rejected") {
    SeqModelParams p = tiny_model(1);
    CHECK_THROWS_AS(beam_decode(p, {4}, DecodeConfig{2, 0, 1.0}), std::invalid_argument);
    CHECK_THROWS_AS(greedy_decode(p, {4}, DecodeConfig{1, 1, 1.0}), std::invalid_argument);
  }
}
