#include <pybind11/pybind11.h>
#include <pybind11/operators.h>
#include <pybind11/stl.h>

#include <sstream>

#include "ami/cli.hpp"
#include "ami/trainer.hpp"

namespace py = pybind11;
using namespace ami;

namespace {

using PairList = std::vector<std::pair<TokenSequence, TokenSequence>>;
using JointList = std::vector<std::tuple<TokenSequence, TokenSequence, double>>;

JointTable to_joint(const JointList& rows) {
  JointTable j;
  for (const auto& [s, t, p] : rows) j.entries.push_back({s, t, p});
  j.validate();
  return j;
}

JointList from_joint(const JointTable& j) {
  JointList rows;
  for (const auto& e : j.entries) rows.emplace_back(e.source, e.target, e.prob);
  return rows;
}

Tensor to_matrix(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw std::invalid_argument("embedding needs at least one row");
  std::vector<double> flat;
  for (const auto& r : rows) {
    if (r.size() != rows.front().size()) throw std::invalid_argument("embedding rows differ in length");
    flat.insert(flat.end(), r.begin(), r.end());
  }
  return Tensor::matrix(rows.size(), rows.front().size(), std::move(flat));
}

py::dict dataset_dict(const Dataset& d) {
  PairList pairs;
  for (const auto& p : d.pairs) pairs.emplace_back(p.source, p.target);
  py::dict out;
  out["pairs"] = pairs;
  out["vocab"] = d.vocab;
  out["joint"] = d.joint ? py::cast(from_joint(*d.joint)) : py::none();
  return out;
}

}  // namespace

PYBIND11_MODULE(_ami, m) {
  m.doc() = "Adversarial mutual-information training: tasks, metrics, configs and the command line";

  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_RuntimeError);

  m.attr("PAD") = kPad;
  m.attr("BOS") = kBos;
  m.attr("EOS") = kEos;
  m.attr("FIRST_CONTENT") = kFirstContent;

  py::class_<Vocab>(m, "Vocab")
      .def(py::init<>())
      .def_static("synthetic", &Vocab::synthetic, py::arg("content_tokens"))
      .def("add", &Vocab::add)
      .def("id", &Vocab::id)
      .def("token", &Vocab::token)
      .def("encode", &Vocab::encode)
      .def("decode", &Vocab::decode)
      .def("__contains__", &Vocab::contains)
      .def("__len__", &Vocab::size)
      .def_property_readonly("tokens", &Vocab::tokens)
      .def(py::self == py::self);

  m.def(
      "generate",
      [](const std::string& kind, int n_pairs, int content_tokens, int min_len, int max_len, double mixture_p,
         int n_sources, std::uint64_t seed) {
        TaskSpec spec;
        spec.kind = parse_task_kind(kind);
        spec.content_tokens = content_tokens;
        spec.min_len = min_len;
        spec.max_len = max_len;
        spec.mixture_p = mixture_p;
        spec.n_sources = n_sources;
        spec.seed = seed;
        return dataset_dict(generate(spec, n_pairs));
      },
      py::arg("kind"), py::arg("n_pairs"), py::arg("content_tokens") = 8, py::arg("min_len") = 1,
      py::arg("max_len") = 3, py::arg("mixture_p") = 0.5, py::arg("n_sources") = 0, py::arg("seed") = 0,
      "Synthetic task corpus as a dict with pairs, vocab and (for pooled tasks) the joint table.");
  m.def(
      "load_corpus", [](const std::string& path) { return dataset_dict(load_corpus(path)); }, py::arg("path"));

  m.def(
      "exact_mi", [](const JointList& joint) { return exact_mi(to_joint(joint)); }, py::arg("joint"),
      "Mutual information in nats of a list of (source, target, prob).");
  m.def(
      "source_entropy", [](const JointList& joint) { return source_entropy(to_joint(joint)); }, py::arg("joint"));

  m.def("dist_n", &dist_n, py::arg("corpus"), py::arg("n"));
  m.def("ent_4", &ent_4, py::arg("corpus"));
  m.def("bleu", &bleu, py::arg("hypotheses"), py::arg("references"), py::arg("max_n") = 4);
  m.def(
      "embedding_relevance",
      [](const TokenSequence& h, const TokenSequence& r, const std::vector<std::vector<double>>& embedding) {
        const Relevance rel = embedding_relevance(h, r, to_matrix(embedding));
        py::dict out;
        out["average"] = rel.average;
        out["greedy"] = rel.greedy;
        out["extrema"] = rel.extrema;
        out["degenerate"] = rel.degenerate;
        return out;
      },
      py::arg("hypothesis"), py::arg("reference"), py::arg("embedding"));

  m.def(
      "parse_config",
      [](const std::string& text) {
        const TrainConfig c = parse_config(text);
        validate(c);
        return to_text(c);
      },
      py::arg("text"), "Validated canonical form of a key = value training config.");

  m.def(
      "checkpoint_info",
      [](const std::string& path) {
        const TrainState s = load_checkpoint(path);
        py::dict out;
        out["outer_iteration"] = s.outer_iteration;
        out["global_step"] = s.global_step;
        out["vocab"] = s.vocab;
        out["hidden"] = s.forward.config.hidden;
        out["embed"] = s.forward.config.embed;
        out["max_len"] = s.forward.config.max_len;
        out["parameters"] = s.forward.parameter_count() + s.backward.parameter_count();
        return out;
      },
      py::arg("path"));

  m.def("file_fingerprint", &cli::file_fingerprint, py::arg("path"));
  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run(args, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs the command line in-process; returns (exit_code, stdout, stderr).");
  m.attr("__version__") = cli::kToolVersion;
}
