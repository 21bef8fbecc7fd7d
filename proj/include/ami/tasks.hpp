#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ami/infometrics.hpp"
#include "ami/seqmodel.hpp"

namespace ami {

enum class TaskKind { Copy, Reverse, Cipher, BlandMixture };

std::string to_string(TaskKind kind);
/// Throws std::invalid_argument for an unknown name.
TaskKind parse_task_kind(const std::string& name);

struct TaskSpec {
  TaskKind kind = TaskKind::Copy;
  int content_tokens = 8;  // vocab size excluding the reserved ids
  int min_len = 1;
  int max_len = 3;
  double mixture_p = 0.5;  // bland_mixture only
  // Size of the fixed uniform source pool. With a pool the task is
  // enumerable and carries its exact joint table; 0 draws fresh sources.
  int n_sources = 0;
  std::uint64_t seed = 0;
};

/// Throws std::invalid_argument when the spec cannot be realised.
void validate(const TaskSpec& spec);

struct Dataset {
  std::vector<SequencePair> pairs;
  Vocab vocab;
  std::optional<JointTable> joint;
};

/// Seeded generation. bland_mixture sends each source to the generic target
/// (the first content token alone) with probability mixture_p and otherwise
/// to its own enciphered copy; its sources avoid the generic token.
Dataset generate(const TaskSpec& spec, int n_pairs);

/// The exact joint table of an enumerable spec.
JointTable joint_table(const TaskSpec& spec);

/// Tab-separated "source<TAB>target" lines, whitespace tokenised. The vocab
/// is built in first-appearance order unless one is supplied, in which case
/// unknown tokens are an error. Malformed lines raise std::runtime_error
/// naming the line number.
Dataset load_corpus(const std::string& path);
Dataset load_corpus(const std::string& path, const Vocab& vocab);
void write_corpus(const std::string& path, const Dataset& dataset);

/// Joint-table sidecar (JSON, tokens spelled out through the vocab).
void write_joint(const std::string& path, const JointTable& joint, const Vocab& vocab);
JointTable load_joint(const std::string& path, const Vocab& vocab);

struct Split {
  Dataset train, valid, test;
};

/// Seeded shuffle, then floor(n * valid) and floor(n * test) pairs go to the
/// validation and test parts and the remainder to training. Fractions are
/// (train, valid, test) and must sum to 1 within 1e-9.
Split split(const Dataset& dataset, const std::array<double, 3>& fractions, std::uint64_t seed);

}  // namespace ami
