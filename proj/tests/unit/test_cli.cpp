#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "ami/cli.hpp"
#include "ami/trainer.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace ami;
namespace fs = std::filesystem;

namespace {

fs::path workdir(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "ami_test_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome invoke(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void put(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

const char* kSmallRun =
    "seed = 7\n"
    "data = bland.tsv\n"
    "pretrain_steps = 60\n"
    "outer_iterations = 3\n"
    "noise_steps = 2\n"
    "forward_steps = 3\n"
    "backward_steps = 4\n"
    "eval_every = 2\n"
    "eval_samples = 40\n";

fs::path bland_dir(const std::string& name) {
  const fs::path dir = workdir(name);
  const auto g = invoke({"gen-data", "--kind", "bland_mixture", "--content-tokens", "8", "--n-sources", "8", "--pairs",
                      "200", "--seed", "3", "--out", (dir / "bland.tsv").string()});
  REQUIRE(g.code == cli::kOk);
  put(dir / "run.cfg", kSmallRun);
  return dir;
}

}  // namespace

TEST_CASE("gen-data") {
  const fs::path dir = workdir("gen");
  const std::string a = (dir / "a.tsv").string(), b = (dir / "b.tsv").string();
  SUBCASE("valid spec, reproducible bytes") {
    auto r = invoke({"gen-data", "--kind", "cipher", "--n-sources", "12", "--pairs", "300", "--seed", "5", "--out", a});
    CHECK(r.code == 0);
    CHECK(r.out.find("300 cipher pairs") != std::string::npos);
    CHECK(fs::exists(a + ".joint.json"));
    r = invoke({"gen-data", "--kind", "cipher", "--n-sources", "12", "--pairs", "300", "--seed", "5", "--out", b});
    CHECK(r.code == 0);
    CHECK(cli::file_fingerprint(a) == cli::file_fingerprint(b));
    CHECK(slurp(a + ".joint.json") == slurp(b + ".joint.json"));
    r = invoke({"gen-data", "--kind", "cipher", "--n-sources", "12", "--pairs", "300", "--seed", "6", "--out", b,
             "--overwrite"});
    CHECK(r.code == 0);
    CHECK(cli::file_fingerprint(a) != cli::file_fingerprint(b));
  }
  SUBCASE("no sidecar without a pool") {
    CHECK(invoke({"gen-data", "--kind", "copy", "--out", a}).code == 0);
    CHECK_FALSE(fs::exists(a + ".joint.json"));
  }
  SUBCASE("usage errors") {
    auto r = invoke({"gen-data", "--kind", "nope", "--out", a});
    CHECK(r.code == cli::kUsage);
    CHECK(r.err.find("unknown task kind") != std::string::npos);
    CHECK(invoke({"gen-data", "--kind", "copy", "--min-len", "4", "--max-len", "2", "--out", a}).code == cli::kUsage);
    CHECK(invoke({"gen-data", "--kind", "copy", "--pairs", "x", "--out", a}).code == cli::kUsage);
    CHECK(invoke({"gen-data", "--out", a}).code == cli::kUsage);
    CHECK(invoke({}).code == cli::kUsage);
    CHECK(invoke({"frobnicate"}).code == cli::kUsage);
  }
  SUBCASE("refuses to clobber") {
    CHECK(invoke({"gen-data", "--kind", "copy", "--out", a}).code == 0);
    const std::string before = slurp(a);
    auto r = invoke({"gen-data", "--kind", "copy", "--seed", "9", "--out", a});
    CHECK(r.code == cli::kUsage);
    CHECK(r.err.find("--overwrite") != std::string::npos);
    CHECK(slurp(a) == before);
  }
  SUBCASE("help") {
    auto r = invoke({"--help"});
    CHECK(r.code == 0);
    CHECK(r.out.find("bound-track") != std::string::npos);
    CHECK(invoke({"train", "--help"}).code == 0);
  }
}

TEST_CASE("train: artifacts, step grids and manifest rerun") {
  const fs::path dir = bland_dir("train");
  const std::string cfg = (dir / "run.cfg").string();
  const fs::path ami_out = dir / "ami", mmi_out = dir / "mmi", rerun = dir / "rerun";

  REQUIRE(invoke({"train", "--config", cfg, "--out", ami_out.string()}).code == 0);
  REQUIRE(invoke({"train", "--config", cfg, "--mode", "mmi", "--out", mmi_out.string()}).code == 0);
  for (const char* name : {"metrics.csv", "bounds.csv", "diagnostics.jsonl", "pretrained.ckpt", "final.ckpt",
                           "manifest.json"}) {
    CHECK(fs::exists(ami_out / name));
  }

  std::ifstream ai(ami_out / "metrics.csv"), mi(mmi_out / "metrics.csv");
  const auto a_rows = read_metrics_csv(ai), m_rows = read_metrics_csv(mi);
  REQUIRE(a_rows.size() == m_rows.size());
  std::vector<long> steps;
  for (std::size_t i = 0; i < a_rows.size(); ++i) {
    CHECK(a_rows[i].step == m_rows[i].step);
    steps.push_back(a_rows[i].step);
  }
  CHECK(steps == std::vector<long>{0, 2, 3});

  const auto manifest = nlohmann::json::parse(slurp(ami_out / "manifest.json"));
  CHECK(manifest["seed"] == 7);
  CHECK(manifest["mode"] == "ami");
  CHECK(manifest["tool_version"] == cli::kToolVersion);
  CHECK(manifest["dataset"]["fnv1a"] == cli::file_fingerprint((dir / "bland.tsv").string()));
  CHECK(manifest["clip"]["violations"] == 0);
  CHECK(fs::path(manifest["dataset"]["path"].get<std::string>()).is_absolute());

  SUBCASE("rerun from manifest is byte-identical") {
    auto r = invoke({"train", "--from-manifest", (ami_out / "manifest.json").string(), "--out", rerun.string()});
    REQUIRE(r.code == 0);
    CHECK(slurp(rerun / "metrics.csv") == slurp(ami_out / "metrics.csv"));
    CHECK(slurp(rerun / "bounds.csv") == slurp(ami_out / "bounds.csv"));
    CHECK(slurp(rerun / "final.ckpt") == slurp(ami_out / "final.ckpt"));
  }
  SUBCASE("rerun from manifest checks the dataset hash") {
    std::ofstream(dir / "bland.tsv", std::ios::app) << "w5\tw6\n";
    auto r = invoke({"train", "--from-manifest", (ami_out / "manifest.json").string(), "--out", rerun.string()});
    CHECK(r.code == cli::kDataMismatch);
    CHECK(r.err.find("fingerprint") != std::string::npos);
  }
  SUBCASE("existing outputs need --overwrite") {
    const std::string before = slurp(ami_out / "metrics.csv");
    CHECK(invoke({"train", "--config", cfg, "--out", ami_out.string()}).code == cli::kUsage);
    CHECK(invoke({"train", "--config", cfg, "--out", ami_out.string(), "--overwrite"}).code == 0);
    CHECK(slurp(ami_out / "metrics.csv") == before);
  }
  SUBCASE("AMI_SEED overrides the config seed") {
    ::setenv("AMI_SEED", "11", 1);
    auto r = invoke({"train", "--config", cfg, "--out", (dir / "env").string()});
    ::unsetenv("AMI_SEED");
    REQUIRE(r.code == 0);
    CHECK(nlohmann::json::parse(slurp(dir / "env" / "manifest.json"))["seed"] == 11);
    CHECK(slurp(dir / "env" / "metrics.csv") != slurp(ami_out / "metrics.csv"));
  }
}

TEST_CASE("train: usage and numeric failures") {
  const fs::path dir = bland_dir("train_errors");
  const std::string out = (dir / "out").string();
  CHECK(invoke({"train", "--config", (dir / "missing.cfg").string(), "--out", out}).code == cli::kUsage);
  CHECK(invoke({"train", "--out", out}).code == cli::kUsage);

  put(dir / "bad.cfg", std::string(kSmallRun) + "hidden = -3\n");
  auto r = invoke({"train", "--config", (dir / "bad.cfg").string(), "--out", out});
  CHECK(r.code == cli::kUsage);

  put(dir / "typo.cfg", std::string(kSmallRun) + "lerning_rate = 1\n");
  r = invoke({"train", "--config", (dir / "typo.cfg").string(), "--out", out});
  CHECK(r.code == cli::kUsage);
  CHECK(r.err.find("line 10") != std::string::npos);

  CHECK(invoke({"train", "--config", (dir / "run.cfg").string(), "--mode", "sgd", "--out", out}).code == cli::kUsage);

  put(dir / "nodata.cfg", "data = nowhere.tsv\n");
  CHECK(invoke({"train", "--config", (dir / "nodata.cfg").string(), "--out", out}).code == cli::kDataMismatch);

  put(dir / "nan.cfg", std::string(kSmallRun) + "pretrain_lr = 1e308\n");
  r = invoke({"train", "--config", (dir / "nan.cfg").string(), "--out", out});
  CHECK(r.code == cli::kNumeric);
  REQUIRE(fs::exists(dir / "out" / "last_good.ckpt"));
  TrainState kept = load_checkpoint((dir / "out" / "last_good.ckpt").string());
  CHECK(kept.forward.all_finite());
  CHECK(kept.backward.all_finite());
}

// One pretrained copy model shared by the eval subcases.
fs::path copy_run() {
  static const fs::path dir = [] {
    const fs::path d = workdir("eval");
    REQUIRE(invoke({"gen-data", "--kind", "copy", "--content-tokens", "6", "--pairs", "400", "--seed", "1", "--out",
                    (d / "copy.tsv").string()})
                .code == 0);
    put(d / "copy.cfg",
        "mode = mle\nseed = 2\ndata = copy.tsv\npretrain_steps = 1500\nouter_iterations = 1\n"
        "forward_steps = 1\nbackward_steps = 1\neval_samples = 40\n");
    REQUIRE(invoke({"train", "--config", (d / "copy.cfg").string(), "--out", (d / "run").string()}).code == 0);
    return d;
  }();
  return dir;
}

TEST_CASE("eval") {
  const fs::path dir = copy_run();
  fs::remove(dir / "report.json");
  const std::string ckpt = (dir / "run" / "pretrained.ckpt").string();

  SUBCASE("pretrained copy model") {
    const fs::path report = dir / "report.json";
    REQUIRE(invoke({"eval", "--checkpoint", ckpt, "--data", (dir / "copy.tsv").string(), "--out", report.string()}).code ==
            0);
    const auto j = nlohmann::json::parse(slurp(report));
    for (const char* key : {"dist1", "dist2", "ent4", "avg_rel", "greedy_rel", "extrema_rel", "bleu"}) {
      CHECK(j["metrics"][key].is_number());
    }
    for (const char* key : {"bound_estimate", "bound_stderr"}) CHECK(j["info"][key].is_number());
    CHECK(j["info"]["relative"] == true);
    CHECK(j["info"]["exact_mi"].is_null());
    CHECK(j["metrics"]["bleu"].get<double>() >= 0.99);
    CHECK(invoke({"eval", "--checkpoint", ckpt, "--data", (dir / "copy.tsv").string(), "--out", report.string()}).code ==
          cli::kUsage);
  }
  SUBCASE("vocabulary mismatch") {
    put(dir / "other.tsv", "zz yy\tqq\n");
    auto r = invoke({"eval", "--checkpoint", ckpt, "--data", (dir / "other.tsv").string(), "--out",
                  (dir / "o.json").string()});
    CHECK(r.code == cli::kArtifactMismatch);
    CHECK(r.err.find("vocabulary") != std::string::npos);
  }
  SUBCASE("damaged checkpoint") {
    std::string bytes = slurp(ckpt);
    bytes[bytes.size() / 2] ^= 0x20;
    put(dir / "bad.ckpt", bytes);
    CHECK(invoke({"eval", "--checkpoint", (dir / "bad.ckpt").string(), "--data", (dir / "copy.tsv").string(), "--out",
               (dir / "o.json").string()})
              .code == cli::kArtifactMismatch);
    CHECK(invoke({"eval", "--checkpoint", (dir / "none.ckpt").string(), "--data", (dir / "copy.tsv").string(), "--out",
               (dir / "o.json").string()})
              .code == cli::kArtifactMismatch);
  }
}

TEST_CASE("bound-track") {
  const fs::path dir = workdir("track");
  const std::string header = "step,loss,bound,stderr,dist1,dist2,ent4,bleu,backward_gap\n";
  put(dir / "a.csv", header + "0,1,-2.5,0.1,0,0,0,0,0\n5,1,-1.25,0.1,0,0,0,0,0\n10,1,0.5,0.1,0,0,0,0,0\n");
  put(dir / "b.csv", header + "0,1,-3,0.1,0,0,0,0,0\n5,1,-1.5,0.1,0,0,0,0,0\n10,1,0.75,0.1,0,0,0,0,0\n");
  put(dir / "c.csv", header + "0,1,-3,0.1,0,0,0,0,0\n4,1,-1.5,0.1,0,0,0,0,0\n10,1,0.75,0.1,0,0,0,0,0\n");
  const std::string out = (dir / "track.csv").string();

  SUBCASE("hand-built fixture") {
    REQUIRE(invoke({"bound-track", "--ami", (dir / "a.csv").string(), "--mmi", (dir / "b.csv").string(), "--out", out})
                .code == 0);
    CHECK(slurp(out) ==
          "step,bound_ami,bound_mmi,gap\n"
          "0,-2.5,-3,0.5\n"
          "5,-1.25,-1.5,0.25\n"
          "10,0.5,0.75,-0.25\n");
  }
  SUBCASE("identical inputs") {
    REQUIRE(invoke({"bound-track", "--ami", (dir / "a.csv").string(), "--mmi", (dir / "a.csv").string(), "--out", out})
                .code == 0);
    std::istringstream lines(slurp(out));
    std::string line;
    std::getline(lines, line);
    int rows = 0;
    while (std::getline(lines, line)) {
      CHECK(line.substr(line.rfind(',') + 1) == "0");
      ++rows;
    }
    CHECK(rows == 3);
  }
  SUBCASE("mismatched grids") {
    CHECK(invoke({"bound-track", "--ami", (dir / "a.csv").string(), "--mmi", (dir / "c.csv").string(), "--out", out})
              .code == cli::kDataMismatch);
    put(dir / "short.csv", header + "0,1,-3,0.1,0,0,0,0,0\n");
    CHECK(invoke({"bound-track", "--ami", (dir / "a.csv").string(), "--mmi", (dir / "short.csv").string(), "--out", out})
              .code == cli::kDataMismatch);
    CHECK_FALSE(fs::exists(out));
  }
  SUBCASE("unreadable input") {
    put(dir / "junk.csv", "step,bound\nx,y\n");
    CHECK(invoke({"bound-track", "--ami", (dir / "a.csv").string(), "--mmi", (dir / "junk.csv").string(), "--out", out})
              .code == cli::kDataMismatch);
    CHECK(invoke({"bound-track", "--ami", (dir / "none.csv").string(), "--mmi", (dir / "a.csv").string(), "--out", out})
              .code == cli::kDataMismatch);
  }
}
