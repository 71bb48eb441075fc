#pragma once

// Synthetic long-range classification tasks and external sequence data.
//
// Every generated sample is a pure function of (spec, split, index). Splits
// are kept disjoint by content: a candidate drawn for split s is accepted
// only when its content hash is s modulo 3, otherwise the next candidate in
// that sample's stream is tried.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nrnm/tensor.hpp"

namespace nrnm {

struct Sample {
  Tensor x;  // [T_n, D]
  int label = 0;
};

// Padded batch: x is [B, T, D] with zeros past each sequence's length.
struct SequenceBatch {
  Tensor x;
  std::vector<std::size_t> lengths;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t steps() const { return x.rank() == 3 ? x.dim(1) : 0; }
  std::size_t features() const { return x.rank() == 3 ? x.dim(2) : 0; }
  // Lengths in [1, T], labels in [0, classes).
  void validate(std::size_t classes) const;
  // [B, D] slice at step t.
  Tensor step(std::size_t t) const;
};

SequenceBatch make_batch(std::span<const Sample* const> samples);
SequenceBatch make_batch(std::span<const Sample> samples);
// Consecutive batches of at most batch_size samples, in order.
std::vector<SequenceBatch> make_batches(std::span<const Sample> samples, std::size_t batch_size);

enum class TaskKind { CopyMemory, Adding, SegmentOrder, Csv, Jsonl };

const char* to_string(TaskKind kind);
TaskKind parse_task(const std::string& name);

enum class Split { Train = 0, Val = 1, Test = 2 };

const char* to_string(Split split);

struct TaskSpec {
  TaskKind task = TaskKind::CopyMemory;
  std::size_t T = 60;
  std::size_t G = 40;  // dependency gap
  std::size_t K = 8;   // classes (adding is always binary)
  std::size_t noise_symbols = 8;  // copy_memory distractor alphabet
  std::size_t motif_len = 3;      // segment_order motif length
  std::size_t n_train = 1000;
  std::size_t n_val = 200;
  std::size_t n_test = 200;
  std::uint64_t seed = 1;
  std::string data;       // csv / jsonl training file
  std::string eval_data;  // optional csv / jsonl test file

  bool synthetic() const { return task != TaskKind::Csv && task != TaskKind::Jsonl; }
  std::size_t classes() const;
  std::size_t input_dim() const;
  // Throws ConfigError naming the field.
  void validate() const;
};

// Classification form of the copy task: one-hot tokens; the label token sits
// G steps before the last step, every other step is a distractor token from
// a disjoint alphabet.
Sample gen_copy_memory(const TaskSpec& spec, Split split, std::size_t index);

// Binary adding problem: channel 0 holds uniform values, channel 1 marks two
// positions at least G apart; label is whether the marked values sum above 1.
Sample gen_adding(const TaskSpec& spec, Split split, std::size_t index);
int adding_label(double first, double second);

// Motif A, a noise gap of G steps, motif B, then noise up to T. The label is
// the ordered pair (A, B) of distinct motifs. Channel P (the last) carries
// label-independent jitter at every step.
Sample gen_segment_order(const TaskSpec& spec, Split split, std::size_t index);

// P with P * (P - 1) == K.
std::size_t motif_count(const TaskSpec& spec);
// P templates of shape [motif_len, P + 1]; pairwise distinct, derived from the seed.
std::vector<Tensor> motif_templates(const TaskSpec& spec);
int segment_label(std::size_t first, std::size_t second, std::size_t motifs);
std::pair<std::size_t, std::size_t> segment_pair(int label, std::size_t motifs);

Sample generate_sample(const TaskSpec& spec, Split split, std::size_t index);
std::vector<Sample> generate(const TaskSpec& spec, Split split, std::size_t count);

std::uint64_t sample_hash(const Sample& s);

// ---------------------------------------------------------------------------
// External data

enum class ExternalFormat { Csv, Jsonl };

// Column layout of a CSV file. An empty feature list selects every column
// whose name starts with "feat_", in header order.
struct ExternalSchema {
  std::string id_column = "seq_id";
  std::string step_column = "step";
  std::string label_column = "label";
  std::vector<std::string> feature_columns;
};

// Sorted label names; integer-valued labels sort numerically.
struct LabelVocabulary {
  std::vector<std::string> names;

  static LabelVocabulary build(std::vector<std::string> labels);
  int index(const std::string& name) const;  // -1 when unknown
  std::size_t size() const { return names.size(); }
};

struct ExternalData {
  std::vector<Sample> samples;
  std::vector<std::string> ids;
  LabelVocabulary vocab;
  std::size_t input_dim = 0;
  std::vector<std::string> warnings;
};

// Sequences keep first-appearance order; rows within a sequence are ordered
// by step. With a fixed vocabulary, unknown labels are a ParseError.
ExternalData load_external(const std::filesystem::path& path, ExternalFormat format,
                           const ExternalSchema& schema = {}, const LabelVocabulary* vocab = nullptr);

// Writes `seq_id,step,feat_0..feat_{D-1},label` with round-trip exact values.
void export_csv(std::span<const Sample> samples, const std::filesystem::path& path);
void export_jsonl(std::span<const Sample> samples, const std::filesystem::path& path);

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> val;
  std::vector<Sample> test;
  std::size_t input_dim = 0;
  std::size_t classes = 0;
  std::vector<std::string> warnings;
};

// Synthetic tasks generate n_train/n_val/n_test samples. External tasks load
// `data` and hold out sequences by position: index % 10 == 9 goes to val and,
// when no `eval_data` is given, index % 10 == 8 goes to test. `eval_data`,
// when given, is the test split and must use labels seen in `data`.
Dataset build_dataset(const TaskSpec& spec);

}  // namespace nrnm
