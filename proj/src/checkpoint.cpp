#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ami/trainer.hpp"

namespace ami {

namespace {

constexpr char kMagic[8] = {'A', 'M', 'I', 'C', 'K', 'P', 'T', '\0'};

std::uint64_t fnv1a(const std::string& bytes, std::size_t n) {
  std::uint64_t h = 1469598103934665603ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(bytes[i]);
    h *= 1099511628211ull;
  }
  return h;
}

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void i64(std::int64_t v) { le(static_cast<std::uint64_t>(v), 8); }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
  void str(const std::string& s) {
    u64(s.size());
    out_ += s;
  }
  void raw(const char* p, std::size_t n) { out_.append(p, n); }
  std::string& bytes() { return out_; }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  std::string out_;
};

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end) : in_(bytes), end_(end) {}
  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  std::int64_t i64() { return static_cast<std::int64_t>(le(8)); }
  double f64() { return std::bit_cast<double>(le(8)); }
  std::string str() {
    const std::uint64_t n = u64();
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void expect_raw(const char* p, std::size_t n) {
    need(n);
    if (std::memcmp(in_.data() + pos_, p, n) != 0) throw CheckpointError("checkpoint: bad magic (not a checkpoint file)");
    pos_ += n;
  }
  bool done() const { return pos_ == end_; }

 private:
  void need(std::uint64_t n) const {
    if (n > end_ - pos_) throw CheckpointError("checkpoint: truncated file");
  }
  std::uint64_t le(int n) {
    need(static_cast<std::uint64_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::string& in_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

void put_tensors(Writer& w, const std::string& prefix, const NamedTensors& tensors) {
  for (const auto& [name, t] : tensors) {
    w.str(prefix + name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u64(d);
    for (double v : t.data()) w.f64(v);
  }
}

void put_baseline(Writer& w, const BaselineState& b) {
  w.f64(b.decay());
  w.f64(b.value());
  w.u8(b.initialized() ? 1 : 0);
}

BaselineState get_baseline(Reader& r) {
  const double decay = r.f64();
  const double value = r.f64();
  const bool init = r.u8() != 0;
  BaselineState b(decay);
  b.restore(value, init);
  return b;
}

}  // namespace

std::string serialize(const TrainState& s) {
  if (!(s.forward.config == s.backward.config)) throw CheckpointError("checkpoint: networks must share one config");
  Writer w;
  w.raw(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);
  const ModelConfig& mc = s.forward.config;
  w.u32(static_cast<std::uint32_t>(mc.hidden));
  w.u32(static_cast<std::uint32_t>(mc.embed));
  w.u32(static_cast<std::uint32_t>(mc.vocab_size));
  w.u32(static_cast<std::uint32_t>(mc.max_len));
  w.i64(s.outer_iteration);
  w.i64(s.global_step);
  put_baseline(w, s.forward_baseline);
  put_baseline(w, s.noise_baseline);
  w.f64(s.noise.lambda);
  w.str(s.rng.state());
  w.u64(static_cast<std::uint64_t>(s.vocab.size()));
  for (const auto& t : s.vocab.tokens()) w.str(t);
  w.u64(s.forward.tensors.size() + s.backward.tensors.size() + s.noise.tensors.size());
  put_tensors(w, "forward.", s.forward.tensors);
  put_tensors(w, "backward.", s.backward.tensors);
  put_tensors(w, "noise.", s.noise.tensors);
  w.u64(fnv1a(w.bytes(), w.bytes().size()));
  return std::move(w.bytes());
}

TrainState deserialize(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic + 4 + 8) throw CheckpointError("checkpoint: truncated file");
  const std::size_t body = bytes.size() - 8;
  Reader r(bytes, bytes.size());
  r.expect_raw(kMagic, sizeof kMagic);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported format version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i) stored |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[body + i])) << (8 * i);
  if (stored != fnv1a(bytes, body)) throw CheckpointError("checkpoint: checksum mismatch (truncated or corrupted)");

  Reader in(bytes, body);
  in.expect_raw(kMagic, sizeof kMagic);
  in.u32();
  ModelConfig mc;
  mc.hidden = static_cast<int>(in.u32());
  mc.embed = static_cast<int>(in.u32());
  mc.vocab_size = static_cast<int>(in.u32());
  mc.max_len = static_cast<int>(in.u32());
  TrainState s;
  try {
    s.forward = SeqModelParams::zeros(mc);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint: bad header: ") + e.what());
  }
  s.backward = SeqModelParams::zeros(mc);
  s.outer_iteration = in.i64();
  s.global_step = in.i64();
  s.forward_baseline = get_baseline(in);
  s.noise_baseline = get_baseline(in);
  const double lambda = in.f64();
  try {
    s.rng.set_state(in.str());
  } catch (const std::invalid_argument&) {
    throw CheckpointError("checkpoint: bad random state");
  }
  const std::uint64_t n_tokens = in.u64();
  if (n_tokens != static_cast<std::uint64_t>(mc.vocab_size)) throw CheckpointError("checkpoint: vocabulary size mismatch");
  std::vector<std::string> tokens;
  for (std::uint64_t i = 0; i < n_tokens; ++i) tokens.push_back(in.str());
  const Vocab reserved;
  for (int i = 0; i < reserved.size(); ++i) {
    if (static_cast<std::size_t>(i) >= tokens.size() || tokens[static_cast<std::size_t>(i)] != reserved.token(i)) {
      throw CheckpointError("checkpoint: reserved tokens missing");
    }
  }
  for (std::size_t i = static_cast<std::size_t>(reserved.size()); i < tokens.size(); ++i) {
    if (s.vocab.add(tokens[i]) != static_cast<int>(i)) throw CheckpointError("checkpoint: repeated vocabulary entry");
  }

  const int latent = 2 * mc.hidden;
  std::map<std::string, Tensor*> slots;
  for (auto& [name, t] : s.forward.tensors) slots["forward." + name] = &t;
  for (auto& [name, t] : s.backward.tensors) slots["backward." + name] = &t;
  const std::uint64_t count = in.u64();
  std::map<std::string, Tensor> noise;
  for (std::uint64_t k = 0; k < count; ++k) {
    const std::string name = in.str();
    const std::uint32_t rank = in.u32();
    if (rank > 4) throw CheckpointError("checkpoint: bad rank for " + name);
    Shape shape(rank);
    std::uint64_t n = 1;
    for (auto& d : shape) {
      d = in.u64();
      if (d > (1u << 24)) throw CheckpointError("checkpoint: bad shape for " + name);
      n *= d;
    }
    if (n > body) throw CheckpointError("checkpoint: truncated file");
    std::vector<double> data(n);
    for (double& v : data) v = in.f64();
    Tensor t(shape, std::move(data));
    if (name.rfind("noise.", 0) == 0) {
      noise[name.substr(6)] = std::move(t);
      continue;
    }
    auto it = slots.find(name);
    if (it == slots.end()) throw CheckpointError("checkpoint: unexpected record " + name);
    if (!it->second->same_shape(t)) throw CheckpointError("checkpoint: shape mismatch for " + name);
    *it->second = std::move(t);
    slots.erase(it);
  }
  if (!slots.empty()) throw CheckpointError("checkpoint: missing record " + slots.begin()->first);
  if (!in.done()) throw CheckpointError("checkpoint: trailing bytes");
  for (const char* key : {"W1", "b1", "W2"}) {
    if (!noise.count(key)) throw CheckpointError(std::string("checkpoint: missing record noise.") + key);
  }
  const auto& w1 = noise.at("W1");
  if (noise.size() != 3 || w1.rank() != 2 || w1.cols() != static_cast<std::size_t>(latent) ||
      noise.at("b1").shape() != Shape{w1.rows()} || noise.at("W2").shape() != Shape{w1.cols(), w1.rows()}) {
    throw CheckpointError("checkpoint: inconsistent noise policy records");
  }
  s.noise.tensors = std::move(noise);
  s.noise.lambda = lambda;
  return s;
}

void save_checkpoint(const TrainState& state, const std::string& path) {
  const std::string bytes = serialize(state);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed for " + path);
}

TrainState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

}  // namespace ami
