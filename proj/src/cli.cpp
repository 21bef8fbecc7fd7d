#include "ami/cli.hpp"

#include <algorithm>
#include <cinttypes>
#include <cmath>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "CLI11.hpp"
#include "ami/trainer.hpp"
#include "json.hpp"

namespace ami::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Carries an exit code out of a subcommand.
struct Exit {
  int code;
  std::string message;
};

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void guard_output(const fs::path& path, bool overwrite) {
  if (fs::exists(path) && !overwrite) {
    throw Exit{kUsage, "refusing to overwrite " + path.string() + " (pass --overwrite)"};
  }
}

template <class Fn>
void write_text(const fs::path& path, Fn&& body) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  body(out);
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

fs::path joint_sidecar(const fs::path& corpus) { return fs::path(corpus.string() + ".joint.json"); }

Dataset read_dataset(const fs::path& path, const Vocab* vocab) {
  try {
    Dataset d = vocab == nullptr ? load_corpus(path.string()) : load_corpus(path.string(), *vocab);
    if (fs::exists(joint_sidecar(path))) d.joint = load_joint(joint_sidecar(path).string(), d.vocab);
    return d;
  } catch (const std::exception& e) {
    throw Exit{kDataMismatch, e.what()};
  }
}

std::string format(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

// ---------------------------------------------------------------- gen-data

struct GenArgs {
  std::string kind;
  int content_tokens = 10;
  int min_len = 1;
  int max_len = 3;
  double mixture_p = 0.5;
  int n_sources = 0;
  int pairs = 1000;
  std::uint64_t seed = 0;
  std::string out;
  std::string joint;
  bool overwrite = false;
};

int gen_data(const GenArgs& a, std::ostream& out) {
  TaskSpec spec;
  try {
    spec.kind = parse_task_kind(a.kind);
    spec.content_tokens = a.content_tokens;
    spec.min_len = a.min_len;
    spec.max_len = a.max_len;
    spec.mixture_p = a.mixture_p;
    spec.n_sources = a.n_sources;
    spec.seed = a.seed;
    validate(spec);
    if (a.pairs < 1) throw std::invalid_argument("--pairs must be >= 1");
  } catch (const std::invalid_argument& e) {
    throw Exit{kUsage, e.what()};
  }
  const fs::path corpus = a.out;
  const fs::path joint = a.joint.empty() ? joint_sidecar(corpus) : fs::path(a.joint);
  guard_output(corpus, a.overwrite);
  Dataset d = generate(spec, a.pairs);
  if (d.joint) guard_output(joint, a.overwrite);
  write_corpus(corpus.string(), d);
  out << "wrote " << d.pairs.size() << " " << to_string(spec.kind) << " pairs to " << corpus.string() << " (vocab "
      << d.vocab.size() << ", fingerprint " << file_fingerprint(corpus.string()) << ")\n";
  if (d.joint) {
    // the sidecar speaks in tokens, so it pairs with the corpus whatever ids a reader assigns
    write_joint(joint.string(), *d.joint, d.vocab);
    out << "joint table: " << d.joint->entries.size() << " rows, exact MI " << format(exact_mi(*d.joint))
        << " nats, H(S) " << format(source_entropy(*d.joint)) << " nats -> " << joint.string() << "\n";
  }
  return kOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string config;
  std::string manifest;
  std::string mode;
  std::string out;
  bool overwrite = false;
};

struct Artifacts {
  static constexpr const char* metrics = "metrics.csv";
  static constexpr const char* bounds = "bounds.csv";
  static constexpr const char* diagnostics = "diagnostics.jsonl";
  static constexpr const char* pretrained = "pretrained.ckpt";
  static constexpr const char* checkpoint = "final.ckpt";
  static constexpr const char* last_good = "last_good.ckpt";
  static constexpr const char* manifest = "manifest.json";
};

TrainConfig config_from_file(const TrainArgs& a, std::ostream& err) {
  if (!fs::exists(a.config)) throw Exit{kUsage, "config file not found: " + a.config};
  TrainConfig c;
  try {
    c = load_config(a.config);
    if (!a.mode.empty()) c.mode = parse_train_mode(a.mode);
    if (const char* env = std::getenv("AMI_SEED"); env != nullptr && *env != '\0') {
      char* end = nullptr;
      errno = 0;
      const unsigned long long v = std::strtoull(env, &end, 10);
      if (errno != 0 || *end != '\0' || env[0] == '-') throw ConfigError(std::string("AMI_SEED is not a seed: ") + env);
      c.seed = v;
      err << "AMI_SEED overrides the config seed: " << v << "\n";
    }
    validate(c);
  } catch (const ConfigError& e) {
    throw Exit{kUsage, std::string("config: ") + e.what()};
  }
  if (c.data.empty()) throw Exit{kUsage, "config: no data path"};
  fs::path data = c.data;
  if (data.is_relative()) data = fs::path(a.config).parent_path() / data;
  c.data = fs::absolute(data).lexically_normal().string();
  return c;
}

TrainConfig config_from_manifest(const TrainArgs& a, std::ostream& err) {
  json m;
  try {
    m = json::parse(read_file(a.manifest));
  } catch (const std::exception& e) {
    throw Exit{kArtifactMismatch, "manifest: " + std::string(e.what())};
  }
  TrainConfig c;
  try {
    c = parse_config(m.at("config").get<std::string>());
    const std::string expected = m.at("dataset").at("fnv1a").get<std::string>();
    if (!fs::exists(c.data)) throw Exit{kDataMismatch, "manifest dataset not found: " + c.data};
    const std::string actual = file_fingerprint(c.data);
    if (actual != expected) {
      throw Exit{kDataMismatch, "dataset fingerprint " + actual + " does not match the manifest (" + expected + ")"};
    }
    if (!a.mode.empty() && parse_train_mode(a.mode) != c.mode) {
      throw Exit{kUsage, "--mode conflicts with the manifest"};
    }
  } catch (const json::exception& e) {
    throw Exit{kArtifactMismatch, "manifest: " + std::string(e.what())};
  } catch (const ConfigError& e) {
    throw Exit{kArtifactMismatch, "manifest config: " + std::string(e.what())};
  }
  if (std::getenv("AMI_SEED") != nullptr) err << "AMI_SEED ignored: the manifest fixes the seed\n";
  return c;
}

void save_abort(const fs::path& dir, const TrainState& state, const std::string& what, std::ostream& err) {
  save_checkpoint(state, (dir / Artifacts::last_good).string());
  err << "numeric failure: " << what << "\nlast good state saved to " << (dir / Artifacts::last_good).string() << "\n";
}

int train_cmd(const TrainArgs& a, std::ostream& out, std::ostream& err) {
  const TrainConfig c = a.manifest.empty() ? config_from_file(a, err) : config_from_manifest(a, err);
  const fs::path dir = a.out;
  fs::create_directories(dir);
  for (const char* name : {Artifacts::metrics, Artifacts::manifest, Artifacts::checkpoint}) {
    guard_output(dir / name, a.overwrite);
  }
  const Dataset all = read_dataset(c.data, nullptr);
  const std::string fingerprint = file_fingerprint(c.data);
  const Split parts = split(all, {1.0 - c.valid_fraction - c.test_fraction, c.valid_fraction, c.test_fraction}, c.seed);
  if (parts.train.pairs.empty()) throw Exit{kDataMismatch, "training split is empty"};
  const Dataset& eval_split = parts.valid.pairs.empty() ? parts.train : parts.valid;

  TrainState state = init_state(c, all.vocab);
  Rng pre_rng(Rng::derive_seed(c.seed, 3));
  try {
    pretrain(state.forward, ModelRole::Forward, parts.train.pairs, c, pre_rng);
    pretrain(state.backward, ModelRole::Backward, parts.train.pairs, c, pre_rng);
  } catch (const NumericError& e) {
    save_abort(dir, state, std::string("pretraining: ") + e.what(), err);
    return kNumeric;
  }
  save_checkpoint(state, (dir / Artifacts::pretrained).string());

  TrainResult result;
  try {
    result = train(state, parts.train.pairs, eval_split, c, [&](const TrainState& s) {
      if (s.outer_iteration % c.eval_every == 0) out << "iteration " << s.outer_iteration << "\n";
    });
  } catch (const TrainingAborted& e) {
    save_abort(dir, e.last_good(), e.what(), err);
    return kNumeric;
  } catch (const NumericError& e) {
    save_abort(dir, state, e.what(), err);
    return kNumeric;
  }
  write_text(dir / Artifacts::metrics, [&](std::ostream& o) { write_metrics_csv(o, result.series); });
  write_text(dir / Artifacts::bounds, [&](std::ostream& o) { write_bound_csv(o, result.bounds); });
  write_text(dir / Artifacts::diagnostics, [&](std::ostream& o) {
    for (const auto& d : result.diagnostics) o << d.to_json() << "\n";
  });
  save_checkpoint(state, (dir / Artifacts::checkpoint).string());

  json manifest = {
      {"tool", "ami"},
      {"tool_version", kToolVersion},
      {"seed", c.seed},
      {"mode", to_string(c.mode)},
      {"config", to_text(c)},
      {"dataset", {{"path", c.data}, {"fnv1a", fingerprint}, {"pairs", all.pairs.size()}}},
      {"artifacts",
       {{"metrics", Artifacts::metrics},
        {"bounds", Artifacts::bounds},
        {"diagnostics", Artifacts::diagnostics},
        {"pretrained", Artifacts::pretrained},
        {"checkpoint", Artifacts::checkpoint}}},
  };
  if (c.mode == TrainMode::Ami) {
    manifest["clip"] = {{"checks", result.clip_checks},
                        {"violations", result.clip_violations},
                        {"max_abs", result.max_backward_abs}};
  }
  write_text(dir / Artifacts::manifest, [&](std::ostream& o) { o << manifest.dump(2) << "\n"; });
  const MetricRow& last = result.series.back();
  out << to_string(c.mode) << " finished after " << state.outer_iteration << " outer iterations: bound "
      << format(last.bound) << " +- " << format(last.stderr_) << ", dist1 " << format(last.dist1) << ", bleu "
      << format(last.bleu) << ", backward_gap " << format(last.backward_gap) << "\n";
  return kOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string config;
  std::string out;
  int samples = 400;
  bool overwrite = false;
};

int eval_cmd(const EvalArgs& a, std::ostream& out) {
  guard_output(a.out, a.overwrite);
  TrainState state;
  try {
    state = load_checkpoint(a.checkpoint);
  } catch (const CheckpointError& e) {
    throw Exit{kArtifactMismatch, e.what()};
  }
  TrainConfig c;
  if (!a.config.empty()) {
    try {
      c = load_config(a.config);
    } catch (const ConfigError& e) {
      throw Exit{kUsage, std::string("config: ") + e.what()};
    }
  }
  c.embed = state.forward.config.embed;
  c.hidden = state.forward.config.hidden;
  c.max_len = state.forward.config.max_len;
  c.eval_samples = a.samples;
  if (c.eval_samples < 2) throw Exit{kUsage, "--samples must be >= 2"};

  // the corpus must speak the checkpoint's vocabulary
  const Dataset own = read_dataset(a.data, nullptr);
  for (int id = kFirstContent; id < own.vocab.size(); ++id) {
    if (!state.vocab.contains(own.vocab.token(id))) {
      throw Exit{kArtifactMismatch, "vocabulary mismatch: token '" + own.vocab.token(id) + "' is not in the checkpoint"};
    }
  }
  const Dataset d = read_dataset(a.data, &state.vocab);
  const Evaluation e = evaluate(state, d, c, 0);
  const auto finite_or_null = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  json report = {
      {"metrics",
       {{"dist1", e.metrics.dist1},
        {"dist2", e.metrics.dist2},
        {"ent4", e.metrics.ent4},
        {"avg_rel", e.metrics.avg_rel},
        {"greedy_rel", e.metrics.greedy_rel},
        {"extrema_rel", e.metrics.extrema_rel},
        {"bleu", e.metrics.bleu}}},
      {"info",
       {{"bound_estimate", e.info.bound_estimate},
        {"bound_stderr", e.info.bound_stderr},
        {"relative", e.relative},
        {"exact_mi", e.has_exact ? finite_or_null(e.info.exact_mi) : json(nullptr)},
        {"source_entropy", e.has_exact ? finite_or_null(e.info.source_entropy) : json(nullptr)},
        {"posterior_kl", e.has_exact ? finite_or_null(e.info.posterior_kl) : json(nullptr)}}},
      {"loss", e.loss},
      {"backward_gap", e.backward_gap},
      {"pairs", d.pairs.size()},
  };
  write_text(a.out, [&](std::ostream& o) { o << report.dump(2) << "\n"; });
  out << "bleu " << format(e.metrics.bleu) << ", dist1 " << format(e.metrics.dist1) << ", bound "
      << format(e.info.bound_estimate) << (e.relative ? " (relative)" : "") << " -> " << a.out << "\n";
  return kOk;
}

// ---------------------------------------------------------------- bound-track

struct TrackArgs {
  std::string ami;
  std::string mmi;
  std::string out;
  bool overwrite = false;
};

int bound_track(const TrackArgs& a, std::ostream& out) {
  guard_output(a.out, a.overwrite);
  auto load = [](const std::string& path) {
    try {
      std::istringstream in(read_file(path));
      return read_metrics_csv(in);
    } catch (const std::exception& e) {
      throw Exit{kDataMismatch, path + ": " + e.what()};
    }
  };
  const auto ami_rows = load(a.ami), mmi_rows = load(a.mmi);
  bool aligned = ami_rows.size() == mmi_rows.size();
  for (std::size_t i = 0; aligned && i < ami_rows.size(); ++i) aligned = ami_rows[i].step == mmi_rows[i].step;
  if (!aligned) throw Exit{kDataMismatch, "step grids differ between " + a.ami + " and " + a.mmi};
  write_text(a.out, [&](std::ostream& o) {
    o << "step,bound_ami,bound_mmi,gap\n";
    char buf[256];
    for (std::size_t i = 0; i < ami_rows.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%ld,%.10g,%.10g,%.10g\n", ami_rows[i].step, ami_rows[i].bound,
                    mmi_rows[i].bound, ami_rows[i].bound - mmi_rows[i].bound);
      o << buf;
    }
  });
  out << "merged " << ami_rows.size() << " rows -> " << a.out << "\n";
  return kOk;
}

}  // namespace

std::string file_fingerprint(const std::string& path) {
  const std::string bytes = read_file(path);
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
  return buf;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Adversarial mutual-information training for sequence models"};
  app.name("ami");
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic task corpus (TSV) and its joint table");
  g->add_option("--kind", gen.kind, "copy, reverse, cipher or bland_mixture")->required();
  g->add_option("--content-tokens", gen.content_tokens, "Content vocabulary size")->capture_default_str();
  g->add_option("--min-len", gen.min_len, "Shortest source")->capture_default_str();
  g->add_option("--max-len", gen.max_len, "Longest source")->capture_default_str();
  g->add_option("--mixture-p", gen.mixture_p, "Generic-target probability (bland_mixture)")->capture_default_str();
  g->add_option("--n-sources", gen.n_sources, "Fixed source pool size; > 0 makes the task enumerable")
      ->capture_default_str();
  g->add_option("--pairs", gen.pairs, "Number of pairs")->capture_default_str();
  g->add_option("--seed", gen.seed, "Generation seed")->capture_default_str();
  g->add_option("--out", gen.out, "Output corpus path")->required();
  g->add_option("--joint", gen.joint, "Joint-table sidecar path (default <out>.joint.json)");
  g->add_flag("--overwrite", gen.overwrite, "Replace existing outputs");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Pretrain, then run the mle, mmi or ami schedule");
  auto* cfg_opt = t->add_option("--config", tr.config, "key = value config file");
  auto* man_opt = t->add_option("--from-manifest", tr.manifest, "Rerun exactly from a manifest.json");
  cfg_opt->excludes(man_opt);
  t->add_option("--mode", tr.mode, "Override the config mode (mle, mmi, ami)");
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_flag("--overwrite", tr.overwrite, "Replace existing outputs");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a corpus and write a JSON report");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required();
  e->add_option("--data", ev.data, "TSV corpus (joint sidecar picked up when present)")->required();
  e->add_option("--config", ev.config, "Config for reward scale and seed");
  e->add_option("--samples", ev.samples, "Monte Carlo samples for the bound")->capture_default_str();
  e->add_option("--out", ev.out, "Output JSON")->required();
  e->add_flag("--overwrite", ev.overwrite, "Replace existing outputs");

  TrackArgs tk;
  auto* b = app.add_subcommand("bound-track", "Merge the bound columns of an ami and an mmi metrics CSV");
  b->add_option("--ami", tk.ami, "ami metrics.csv")->required();
  b->add_option("--mmi", tk.mmi, "mmi metrics.csv")->required();
  b->add_option("--out", tk.out, "Merged CSV")->required();
  b->add_flag("--overwrite", tk.overwrite, "Replace existing outputs");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
    if (t->parsed() && tr.config.empty() && tr.manifest.empty()) {
      throw CLI::RequiredError("train needs --config or --from-manifest");
    }
  } catch (const CLI::ParseError& pe) {
    const int code = app.exit(pe, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (g->parsed()) return gen_data(gen, out);
    if (t->parsed()) return train_cmd(tr, out, err);
    if (e->parsed()) return eval_cmd(ev, out);
    return bound_track(tk, out);
  } catch (const Exit& x) {
    err << "error: " << x.message << "\n";
    return x.code;
  } catch (const NumericError& ne) {
    err << "numeric failure: " << ne.what() << "\n";
    return kNumeric;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kDataMismatch;
  }
}

}  // namespace ami::cli
