#include "nrnm/tasks.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <optional>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <fmt/format.h>
#include "json.hpp"

#include "nrnm/errors.hpp"
#include "nrnm/rng.hpp"

namespace nrnm {

// ---------------------------------------------------------------------------
// Batches

void SequenceBatch::validate(std::size_t classes) const {
  if (x.rank() != 3) throw DimensionError("batch tensor must be [B, T, D], got " + to_string(x.shape()));
  if (lengths.size() != x.dim(0) || labels.size() != x.dim(0)) {
    throw DimensionError(fmt::format("batch of {} rows has {} lengths and {} labels", x.dim(0), lengths.size(),
                                     labels.size()));
  }
  for (std::size_t b = 0; b < lengths.size(); ++b) {
    if (lengths[b] < 1 || lengths[b] > x.dim(1)) {
      throw DimensionError(fmt::format("sequence {} has length {} outside [1, {}]", b, lengths[b], x.dim(1)));
    }
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= classes) {
      throw DimensionError(fmt::format("sequence {} has label {} outside [0, {})", b, labels[b], classes));
    }
  }
}

Tensor SequenceBatch::step(std::size_t t) const {
  const std::size_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
  Tensor out({B, D});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t d = 0; d < D; ++d) out.at(b, d) = x[(b * T + t) * D + d];
  return out;
}

SequenceBatch make_batch(std::span<const Sample* const> samples) {
  SequenceBatch batch;
  if (samples.empty()) return batch;
  const std::size_t D = samples[0]->x.dim(1);
  std::size_t T = 0;
  for (const Sample* s : samples) {
    if (s->x.rank() != 2 || s->x.dim(1) != D) throw_shape_mismatch("make_batch", samples[0]->x.shape(), s->x.shape());
    T = std::max(T, s->x.dim(0));
  }
  batch.x = Tensor({samples.size(), T, D});
  for (std::size_t b = 0; b < samples.size(); ++b) {
    const Tensor& src = samples[b]->x;
    std::copy(src.storage().begin(), src.storage().end(),
              batch.x.storage().begin() + static_cast<std::ptrdiff_t>(b * T * D));
    batch.lengths.push_back(src.dim(0));
    batch.labels.push_back(samples[b]->label);
  }
  return batch;
}

SequenceBatch make_batch(std::span<const Sample> samples) {
  std::vector<const Sample*> ptrs;
  ptrs.reserve(samples.size());
  for (const Sample& s : samples) ptrs.push_back(&s);
  return make_batch(std::span<const Sample* const>(ptrs));
}

std::vector<SequenceBatch> make_batches(std::span<const Sample> samples, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch", "batch size must be positive");
  std::vector<SequenceBatch> out;
  for (std::size_t i = 0; i < samples.size(); i += batch_size) {
    out.push_back(make_batch(samples.subspan(i, std::min(batch_size, samples.size() - i))));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Task spec

const char* to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::CopyMemory: return "copy_memory";
    case TaskKind::Adding: return "adding";
    case TaskKind::SegmentOrder: return "segment_order";
    case TaskKind::Csv: return "csv";
    case TaskKind::Jsonl: return "jsonl";
  }
  return "?";
}

TaskKind parse_task(const std::string& name) {
  for (TaskKind k : {TaskKind::CopyMemory, TaskKind::Adding, TaskKind::SegmentOrder, TaskKind::Csv, TaskKind::Jsonl}) {
    if (name == to_string(k)) return k;
  }
  throw ConfigError("task", "unknown task '" + name + "' (copy_memory, adding, segment_order, csv, jsonl)");
}

const char* to_string(Split split) {
  switch (split) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

std::size_t TaskSpec::classes() const {
  switch (task) {
    case TaskKind::Adding: return 2;
    case TaskKind::CopyMemory:
    case TaskKind::SegmentOrder: return K;
    default: return 0;
  }
}

std::size_t TaskSpec::input_dim() const {
  switch (task) {
    case TaskKind::CopyMemory: return K + noise_symbols;
    case TaskKind::Adding: return 2;
    case TaskKind::SegmentOrder: return motif_count(*this) + 1;
    default: return 0;
  }
}

void TaskSpec::validate() const {
  if (!synthetic()) {
    if (data.empty()) throw ConfigError("data", "external tasks need a data file");
    return;
  }
  if (T < 1) throw ConfigError("T", "sequence length must be positive");
  if (G >= T) throw ConfigError("G", fmt::format("gap {} must be smaller than T={}", G, T));
  switch (task) {
    case TaskKind::CopyMemory:
      if (K < 2) throw ConfigError("K", "need at least 2 classes");
      if (noise_symbols < 1) throw ConfigError("noise", "need at least one distractor symbol");
      if (G < 1) throw ConfigError("G", "copy_memory needs a gap of at least 1");
      break;
    case TaskKind::Adding:
      if (T < 4) throw ConfigError("T", "adding needs T >= 4");
      break;
    case TaskKind::SegmentOrder:
      motif_count(*this);
      if (motif_len < 1) throw ConfigError("motif_len", "motifs need at least one step");
      if (T < 2 * motif_len + G) {
        throw ConfigError("T", fmt::format("T={} cannot hold two motifs of {} and a gap of {}", T, motif_len, G));
      }
      break;
    default: break;
  }
}

// ---------------------------------------------------------------------------
// Generators

namespace {

Rng candidate_rng(const TaskSpec& spec, Split split, std::size_t index, std::size_t attempt) {
  std::uint64_t s = mix_seed(spec.seed, static_cast<std::uint64_t>(split) + 17);
  s = mix_seed(s, index);
  s = mix_seed(s, attempt);
  return Rng(s);
}

template <typename Draw>
Sample accept_for_split(const TaskSpec& spec, Split split, std::size_t index, Draw&& draw) {
  constexpr std::size_t kMaxAttempts = 4096;
  for (std::size_t attempt = 0; attempt < kMaxAttempts; ++attempt) {
    Rng rng = candidate_rng(spec, split, index, attempt);
    Sample s = draw(rng);
    if (sample_hash(s) % 3 == static_cast<std::uint64_t>(split)) return s;
  }
  throw ConfigError("task", "sample space too small to keep train/val/test disjoint");
}

}  // namespace

std::uint64_t sample_hash(const Sample& s) {
  // FNV-1a over the label and the raw value bytes.
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  feed(&s.label, sizeof(s.label));
  for (std::size_t d : s.x.shape()) feed(&d, sizeof(d));
  for (double v : s.x.storage()) feed(&v, sizeof(v));
  return mix_seed(h, 0);
}

Sample gen_copy_memory(const TaskSpec& spec, Split split, std::size_t index) {
  const std::size_t D = spec.K + spec.noise_symbols;
  const std::size_t planted = spec.T - 1 - spec.G;
  return accept_for_split(spec, split, index, [&](Rng& rng) {
    Sample s;
    s.label = static_cast<int>(rng.below(spec.K));
    s.x = Tensor({spec.T, D});
    for (std::size_t t = 0; t < spec.T; ++t) {
      const std::size_t token = t == planted ? static_cast<std::size_t>(s.label)
                                             : spec.K + rng.below(spec.noise_symbols);
      s.x.at(t, token) = 1.0;
    }
    return s;
  });
}

int adding_label(double first, double second) { return first + second > 1.0 ? 1 : 0; }

Sample gen_adding(const TaskSpec& spec, Split split, std::size_t index) {
  const std::size_t gap = std::max<std::size_t>(spec.G, 1);
  return accept_for_split(spec, split, index, [&](Rng& rng) {
    Sample s;
    s.x = Tensor({spec.T, 2});
    for (std::size_t t = 0; t < spec.T; ++t) s.x.at(t, 0) = rng.uniform();
    const std::size_t a = rng.below(spec.T - gap);
    const std::size_t b = a + gap + rng.below(spec.T - a - gap);
    s.x.at(a, 1) = 1.0;
    s.x.at(b, 1) = 1.0;
    s.label = adding_label(s.x.at(a, 0), s.x.at(b, 0));
    return s;
  });
}

std::size_t motif_count(const TaskSpec& spec) {
  for (std::size_t p = 2; p * (p - 1) <= spec.K; ++p) {
    if (p * (p - 1) == spec.K) return p;
  }
  throw ConfigError("K", fmt::format("segment_order needs K = P*(P-1) ordered motif pairs (2, 6, 12, ...), got {}",
                                     spec.K));
}

std::vector<Tensor> motif_templates(const TaskSpec& spec) {
  const std::size_t P = motif_count(spec), L = spec.motif_len;
  Rng rng(mix_seed(spec.seed, 0x6d6f74696fULL));
  for (;;) {
    std::vector<Tensor> motifs;
    for (std::size_t p = 0; p < P; ++p) {
      Tensor m({L, P + 1});
      for (std::size_t t = 0; t < L; ++t)
        for (std::size_t c = 0; c < P; ++c) m.at(t, c) = rng.below(2) ? 1.0 : -1.0;
      motifs.push_back(std::move(m));
    }
    bool distinct = true;
    for (std::size_t a = 0; a < P && distinct; ++a)
      for (std::size_t b = a + 1; b < P && distinct; ++b) distinct = !(motifs[a] == motifs[b]);
    if (distinct) return motifs;
  }
}

int segment_label(std::size_t first, std::size_t second, std::size_t motifs) {
  if (first == second || first >= motifs || second >= motifs) {
    throw ConfigError("K", fmt::format("invalid motif pair ({}, {}) for {} motifs", first, second, motifs));
  }
  return static_cast<int>(first * (motifs - 1) + (second < first ? second : second - 1));
}

std::pair<std::size_t, std::size_t> segment_pair(int label, std::size_t motifs) {
  const std::size_t first = static_cast<std::size_t>(label) / (motifs - 1);
  const std::size_t rest = static_cast<std::size_t>(label) % (motifs - 1);
  return {first, rest < first ? rest : rest + 1};
}

Sample gen_segment_order(const TaskSpec& spec, Split split, std::size_t index) {
  const std::size_t P = motif_count(spec), L = spec.motif_len;
  const std::vector<Tensor> motifs = motif_templates(spec);
  return accept_for_split(spec, split, index, [&](Rng& rng) {
    Sample s;
    s.label = static_cast<int>(rng.below(spec.K));
    const auto [first, second] = segment_pair(s.label, P);
    s.x = Tensor({spec.T, P + 1});
    const std::size_t second_at = L + spec.G;
    for (std::size_t t = 0; t < spec.T; ++t) {
      if (t < L) {
        for (std::size_t c = 0; c < P; ++c) s.x.at(t, c) = motifs[first].at(t, c);
      } else if (t >= second_at && t < second_at + L) {
        for (std::size_t c = 0; c < P; ++c) s.x.at(t, c) = motifs[second].at(t - second_at, c);
      } else {
        for (std::size_t c = 0; c < P; ++c) s.x.at(t, c) = rng.uniform(-1.0, 1.0);
      }
      s.x.at(t, P) = rng.uniform(-1.0, 1.0);
    }
    return s;
  });
}

Sample generate_sample(const TaskSpec& spec, Split split, std::size_t index) {
  switch (spec.task) {
    case TaskKind::CopyMemory: return gen_copy_memory(spec, split, index);
    case TaskKind::Adding: return gen_adding(spec, split, index);
    case TaskKind::SegmentOrder: return gen_segment_order(spec, split, index);
    default: throw ConfigError("task", std::string(to_string(spec.task)) + " is not a generated task");
  }
}

std::vector<Sample> generate(const TaskSpec& spec, Split split, std::size_t count) {
  spec.validate();
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_sample(spec, split, i));
  return out;
}

// ---------------------------------------------------------------------------
// External data

namespace {

std::optional<long long> as_integer(const std::string& s) {
  long long v = 0;
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || s.empty()) return std::nullopt;
  return v;
}

double parse_number(const std::string& field, const std::string& column, std::size_t line) {
  double v = 0.0;
  const char* begin = field.data();
  const char* end = begin + field.size();
  if (begin != end && *begin == '+') ++begin;
  auto [ptr, ec] = std::from_chars(begin, end, v);
  if (field.empty() || ec != std::errc() || ptr != end) {
    throw ParseError(fmt::format("column '{}': '{}' is not a number", column, field), line);
  }
  if (!std::isfinite(v)) throw ParseError(fmt::format("column '{}': non-finite value", column), line);
  return v;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

struct PendingSequence {
  std::string id;
  std::string label;
  std::size_t label_line = 0;
  std::map<long long, std::vector<double>> rows;
};

ExternalData finish(std::vector<PendingSequence> pending, std::size_t dim, const LabelVocabulary* vocab) {
  ExternalData data;
  data.input_dim = dim;
  if (vocab) {
    data.vocab = *vocab;
  } else {
    std::vector<std::string> labels;
    for (const auto& p : pending) labels.push_back(p.label);
    data.vocab = LabelVocabulary::build(std::move(labels));
  }
  for (auto& p : pending) {
    const int label = data.vocab.index(p.label);
    if (label < 0) throw ParseError(fmt::format("unknown label '{}'", p.label), p.label_line);
    Sample s;
    s.label = label;
    s.x = Tensor({p.rows.size(), dim});
    std::size_t t = 0;
    for (const auto& [step, values] : p.rows) {
      std::copy(values.begin(), values.end(), s.x.storage().begin() + static_cast<std::ptrdiff_t>(t * dim));
      ++t;
    }
    data.samples.push_back(std::move(s));
    data.ids.push_back(p.id);
  }
  return data;
}

ExternalData load_csv(std::istream& in, const ExternalSchema& schema, const LabelVocabulary* vocab) {
  std::string line;
  if (!std::getline(in, line) || line.find_first_not_of(" \t\r") == std::string::npos) {
    ExternalData empty;
    empty.warnings.push_back("empty input: no sequences loaded");
    return empty;
  }
  const std::vector<std::string> header = split_csv(line);
  auto column = [&](const std::string& name) -> std::size_t {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ParseError("missing column '" + name + "'", 1);
    return static_cast<std::size_t>(it - header.begin());
  };
  const std::size_t id_col = column(schema.id_column);
  const std::size_t step_col = column(schema.step_column);
  const std::size_t label_col = column(schema.label_column);
  std::vector<std::size_t> feat_cols;
  if (schema.feature_columns.empty()) {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i].rfind("feat_", 0) == 0) feat_cols.push_back(i);
  } else {
    for (const auto& name : schema.feature_columns) feat_cols.push_back(column(name));
  }
  if (feat_cols.empty()) throw ParseError("no feature columns", 1);

  std::vector<PendingSequence> pending;
  std::map<std::string, std::size_t> by_id;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::vector<std::string> fields = split_csv(line);
    if (fields.size() != header.size()) {
      throw ParseError(fmt::format("expected {} fields, found {}", header.size(), fields.size()), line_no);
    }
    const std::string& id = fields[id_col];
    const auto step = as_integer(fields[step_col]);
    if (!step) throw ParseError(fmt::format("step '{}' is not an integer", fields[step_col]), line_no);
    auto [it, fresh] = by_id.emplace(id, pending.size());
    if (fresh) pending.push_back({id, fields[label_col], line_no, {}});
    PendingSequence& seq = pending[it->second];
    if (seq.label != fields[label_col]) {
      throw ParseError(fmt::format("sequence '{}' changes label from '{}' to '{}'", id, seq.label, fields[label_col]),
                       line_no);
    }
    std::vector<double> values;
    values.reserve(feat_cols.size());
    for (std::size_t c : feat_cols) values.push_back(parse_number(fields[c], header[c], line_no));
    if (!seq.rows.emplace(*step, std::move(values)).second) {
      throw ParseError(fmt::format("sequence '{}' repeats step {}", id, *step), line_no);
    }
  }
  ExternalData data = finish(std::move(pending), feat_cols.size(), vocab);
  if (data.samples.empty()) data.warnings.push_back("empty input: no sequences loaded");
  return data;
}

std::string label_text(const nlohmann::json& j, std::size_t line) {
  if (j.is_string()) return j.get<std::string>();
  if (j.is_number_integer()) return std::to_string(j.get<long long>());
  if (j.is_number()) return fmt::format("{}", j.get<double>());
  throw ParseError("label must be a string or number", line);
}

ExternalData load_jsonl(std::istream& in, const LabelVocabulary* vocab) {
  std::vector<PendingSequence> pending;
  std::size_t dim = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json obj;
    try {
      obj = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), line_no);
    }
    if (!obj.is_object() || !obj.contains("features") || !obj.contains("label")) {
      throw ParseError("expected an object with 'features' and 'label'", line_no);
    }
    PendingSequence seq;
    seq.id = obj.contains("id") ? (obj["id"].is_string() ? obj["id"].get<std::string>() : obj["id"].dump())
                                : std::to_string(pending.size());
    seq.label = label_text(obj["label"], line_no);
    seq.label_line = line_no;
    const auto& feats = obj["features"];
    if (!feats.is_array() || feats.empty()) throw ParseError("'features' must be a non-empty array of rows", line_no);
    long long step = 0;
    for (const auto& row : feats) {
      if (!row.is_array()) throw ParseError("each feature row must be an array", line_no);
      if (dim == 0) dim = row.size();
      if (row.size() != dim || dim == 0) {
        throw ParseError(fmt::format("feature row of width {}, expected {}", row.size(), dim), line_no);
      }
      std::vector<double> values;
      for (const auto& v : row) {
        if (!v.is_number()) throw ParseError("non-numeric feature value", line_no);
        values.push_back(v.get<double>());
      }
      seq.rows.emplace(step++, std::move(values));
    }
    pending.push_back(std::move(seq));
  }
  ExternalData data = finish(std::move(pending), dim, vocab);
  if (data.samples.empty()) data.warnings.push_back("empty input: no sequences loaded");
  return data;
}

}  // namespace

LabelVocabulary LabelVocabulary::build(std::vector<std::string> labels) {
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  const bool numeric = std::all_of(labels.begin(), labels.end(), [](const std::string& s) { return as_integer(s); });
  if (numeric) {
    std::sort(labels.begin(), labels.end(),
              [](const std::string& a, const std::string& b) { return *as_integer(a) < *as_integer(b); });
  }
  return {labels};
}

int LabelVocabulary::index(const std::string& name) const {
  auto it = std::find(names.begin(), names.end(), name);
  return it == names.end() ? -1 : static_cast<int>(it - names.begin());
}

ExternalData load_external(const std::filesystem::path& path, ExternalFormat format, const ExternalSchema& schema,
                           const LabelVocabulary* vocab) {
  std::ifstream in(path);
  if (!in) throw ConfigError("data", "cannot open " + path.string());
  try {
    return format == ExternalFormat::Csv ? load_csv(in, schema, vocab) : load_jsonl(in, vocab);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.message(), e.line());
  }
}

void export_csv(std::span<const Sample> samples, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::size_t D = samples.empty() ? 0 : samples[0].x.dim(1);
  out << "seq_id,step";
  for (std::size_t d = 0; d < D; ++d) out << ",feat_" << d;
  out << ",label\n";
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Tensor& x = samples[i].x;
    for (std::size_t t = 0; t < x.dim(0); ++t) {
      std::string row = fmt::format("{},{}", i, t);
      for (std::size_t d = 0; d < D; ++d) row += fmt::format(",{}", x.at(t, d));
      row += fmt::format(",{}\n", samples[i].label);
      out << row;
    }
  }
}

void export_jsonl(std::span<const Sample> samples, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Tensor& x = samples[i].x;
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t t = 0; t < x.dim(0); ++t) {
      nlohmann::json row = nlohmann::json::array();
      for (std::size_t d = 0; d < x.dim(1); ++d) row.push_back(x.at(t, d));
      rows.push_back(std::move(row));
    }
    out << nlohmann::json{{"id", std::to_string(i)}, {"features", rows}, {"label", samples[i].label}}.dump() << '\n';
  }
}

Dataset build_dataset(const TaskSpec& spec) {
  spec.validate();
  Dataset ds;
  if (spec.synthetic()) {
    ds.train = generate(spec, Split::Train, spec.n_train);
    ds.val = generate(spec, Split::Val, spec.n_val);
    ds.test = generate(spec, Split::Test, spec.n_test);
    ds.input_dim = spec.input_dim();
    ds.classes = spec.classes();
    return ds;
  }
  const ExternalFormat format = spec.task == TaskKind::Csv ? ExternalFormat::Csv : ExternalFormat::Jsonl;
  ExternalData main = load_external(spec.data, format);
  ds.warnings = main.warnings;
  ds.input_dim = main.input_dim;
  ds.classes = main.vocab.size();
  const bool separate_test = !spec.eval_data.empty();
  for (std::size_t i = 0; i < main.samples.size(); ++i) {
    if (i % 10 == 9) {
      ds.val.push_back(std::move(main.samples[i]));
    } else if (!separate_test && i % 10 == 8) {
      ds.test.push_back(std::move(main.samples[i]));
    } else {
      ds.train.push_back(std::move(main.samples[i]));
    }
  }
  if (separate_test) {
    ExternalData eval = load_external(spec.eval_data, format, {}, &main.vocab);
    if (eval.input_dim != 0 && eval.input_dim != ds.input_dim) {
      throw ConfigError("eval_data", fmt::format("{} features, training data has {}", eval.input_dim, ds.input_dim));
    }
    ds.test = std::move(eval.samples);
    ds.warnings.insert(ds.warnings.end(), eval.warnings.begin(), eval.warnings.end());
  }
  return ds;
}

}  // namespace nrnm
