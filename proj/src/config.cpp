#include "nrnm/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <istream>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "nrnm/errors.hpp"

namespace nrnm {

const std::vector<KeyInfo>& config_keys() {
  static const std::vector<KeyInfo> keys = {
      {"version", "run", "build that wrote this manifest (informational)"},
      {"out", "run", "run directory"},
      {"seed", "run", "model init, shuffling and dropout seed"},
      {"precision", "run", "f32 or f64"},
      {"task", "task", "copy_memory, adding, segment_order, csv or jsonl"},
      {"T", "task", "sequence length"},
      {"G", "task", "dependency gap"},
      {"K", "task", "class count (copy_memory, segment_order)"},
      {"noise", "task", "copy_memory distractor symbols"},
      {"motif_len", "task", "segment_order motif length"},
      {"n_train", "task", "training samples"},
      {"n_val", "task", "validation samples"},
      {"n_test", "task", "test samples"},
      {"data_seed", "task", "dataset seed (defaults to seed)"},
      {"data", "task", "csv/jsonl training file"},
      {"eval_data", "task", "csv/jsonl test file"},
      {"model", "model", "lstm, rnn, gru, horder or nrnm"},
      {"depth", "model", "recurrent layers"},
      {"hidden", "model", "hidden width, or one width per layer"},
      {"k", "model", "NRNM block size"},
      {"s", "model", "NRNM stride"},
      {"win", "model", "NRNM sliding window"},
      {"m", "model", "NRNM memory size (defaults to the host layer width)"},
      {"heads", "model", "attention heads"},
      {"inject_layer", "model", "layer hosting the NRNM cell"},
      {"extra_inject", "model", "additional NRNM layers (ablation)"},
      {"attn_scale", "model", "full (1/sqrt(m)) or per_head (1/sqrt(m/heads))"},
      {"order", "model", "high-order RNN lag count"},
      {"dropout", "model", "between-layer dropout rate"},
      {"optimizer", "train", "adam or sgd"},
      {"lr", "train", "learning rate"},
      {"beta1", "train", "Adam beta1"},
      {"beta2", "train", "Adam beta2"},
      {"eps", "train", "Adam epsilon"},
      {"clip", "train", "global gradient norm limit, 0 disables"},
      {"epochs", "train", "training epochs"},
      {"batch", "train", "batch size"},
      {"eval_every", "train", "epochs between validation passes"},
  };
  return keys;
}

const KeyInfo* find_key(const std::string& key) {
  for (const KeyInfo& k : config_keys())
    if (key == k.key) return &k;
  return nullptr;
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string normalize(std::string key) {
  std::replace(key.begin(), key.end(), '-', '_');
  return key;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::uint64_t to_uint(const std::string& key, const std::string& value) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError(key, "expected a non-negative integer, got '" + value + "'");
  }
  return v;
}

double to_double(const std::string& key, const std::string& value) {
  double v = 0;
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), v);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw ConfigError(key, "expected a number, got '" + value + "'");
  }
  return v;
}

std::vector<std::size_t> to_uint_list(const std::string& key, const std::string& value) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(value)) out.push_back(to_uint(key, item));
  return out;
}

}  // namespace

Config Config::parse(std::istream& in, const std::string& source) {
  Config cfg;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    std::string text = line;
    if (auto hash = text.find('#'); hash != std::string::npos && (hash == 0 || std::isspace(static_cast<unsigned char>(text[hash - 1])))) {
      text.resize(hash);
    }
    text = trim(text);
    if (text.empty()) continue;
    auto where = [&] { return fmt::format("{}:{}", source, number); };
    if (text.front() == '[') {
      if (text.back() != ']') throw ConfigError("config", where() + ": unterminated section header");
      const std::string name = trim(std::string_view(text).substr(1, text.size() - 2));
      const bool known = std::any_of(config_keys().begin(), config_keys().end(),
                                     [&](const KeyInfo& k) { return name == k.section; });
      if (!known) throw ConfigError("config", where() + ": unknown section '" + name + "'");
      continue;
    }
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ConfigError("config", where() + ": expected 'key = value'");
    const std::string key = normalize(trim(std::string_view(text).substr(0, eq)));
    const std::string value = trim(std::string_view(text).substr(eq + 1));
    if (!find_key(key)) throw ConfigError(key, where() + ": unknown key");
    if (cfg.has(key)) throw ConfigError(key, where() + ": given twice");
    cfg.values_[key] = value;
  }
  return cfg;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot read " + path.string());
  return parse(in, path.string());
}

void Config::set(std::string key, std::string value) {
  key = normalize(std::move(key));
  if (!find_key(key)) throw ConfigError(key, "unknown key");
  values_[key] = trim(value);
}

std::optional<std::string> Config::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return std::nullopt;
  return it->second;
}

std::string Config::to_text() const {
  std::string out;
  std::string section;
  for (const KeyInfo& k : config_keys()) {
    auto v = get(k.key);
    if (!v) continue;
    if (section != k.section) {
      if (!out.empty()) out += '\n';
      section = k.section;
      out += fmt::format("[{}]\n", section);
    }
    out += fmt::format("{} = {}\n", k.key, *v);
  }
  return out;
}

RunConfig resolve(const Config& cfg) {
  RunConfig run;
  auto str = [&](const char* key) { return cfg.get(key); };
  auto uint = [&](const char* key, auto& field) {
    if (auto v = str(key)) field = static_cast<std::remove_reference_t<decltype(field)>>(to_uint(key, *v));
  };
  auto real = [&](const char* key, double& field) {
    if (auto v = str(key)) field = to_double(key, *v);
  };

  auto task = str("task");
  if (!task) throw ConfigError("task", "required field is missing");
  auto model = str("model");
  if (!model) throw ConfigError("model", "required field is missing");

  if (auto v = str("out")) run.out = *v;
  std::uint64_t seed = 1;
  uint("seed", seed);
  if (auto v = str("precision")) run.model.precision = parse_precision(*v);

  run.task.task = parse_task(*task);
  uint("T", run.task.T);
  uint("G", run.task.G);
  uint("K", run.task.K);
  uint("noise", run.task.noise_symbols);
  uint("motif_len", run.task.motif_len);
  uint("n_train", run.task.n_train);
  uint("n_val", run.task.n_val);
  uint("n_test", run.task.n_test);
  run.task.seed = seed;
  uint("data_seed", run.task.seed);
  if (auto v = str("data")) run.task.data = *v;
  if (auto v = str("eval_data")) run.task.eval_data = *v;
  run.task.validate();

  ModelConfig& m = run.model;
  m.kind = parse_model_kind(*model);
  m.seed = seed;
  uint("depth", m.depth);
  if (auto v = str("hidden")) m.hidden = to_uint_list("hidden", *v);
  uint("k", m.nrnm.k);
  uint("s", m.nrnm.s);
  uint("win", m.nrnm.win);
  uint("heads", m.nrnm.heads);
  uint("inject_layer", m.nrnm.inject_layer);
  if (auto v = str("extra_inject")) m.extra_inject_layers = to_uint_list("extra_inject", *v);
  if (auto v = str("attn_scale")) {
    if (*v == "full") {
      m.nrnm.scale = AttentionScale::FullWidth;
    } else if (*v == "per_head") {
      m.nrnm.scale = AttentionScale::PerHead;
    } else {
      throw ConfigError("attn_scale", "expected full or per_head, got '" + *v + "'");
    }
  }
  uint("order", m.order);
  real("dropout", m.dropout);
  run.memory_size_given = cfg.has("m");
  if (run.memory_size_given) {
    uint("m", m.nrnm.m);
  } else if (m.kind == ModelKind::Nrnm && m.nrnm.inject_layer < m.depth && !m.hidden.empty() &&
             (m.hidden.size() == 1 || m.hidden.size() == m.depth)) {
    m.nrnm.m = m.hidden_at(m.nrnm.inject_layer);
  }

  TrainConfig& t = run.train;
  if (auto v = str("optimizer")) t.optimizer = parse_optimizer(*v);
  real("lr", t.lr);
  real("beta1", t.beta1);
  real("beta2", t.beta2);
  real("eps", t.eps);
  real("clip", t.clip);
  uint("epochs", t.epochs);
  uint("batch", t.batch);
  uint("eval_every", t.eval_every);
  t.seed = seed;
  t.out = run.out;
  t.validate();

  // Dataset-dependent fields get placeholders so everything else is checked now.
  ModelConfig probe = m;
  probe.input_dim = std::max<std::size_t>(1, run.task.input_dim());
  probe.classes = run.task.synthetic() ? run.task.classes() : 2;
  probe.validate();
  return run;
}

ModelConfig model_for(const RunConfig& run, const Dataset& data) {
  ModelConfig m = run.model;
  m.input_dim = data.input_dim;
  m.classes = data.classes;
  m.validate();
  return m;
}

Config snapshot(const RunConfig& run) {
  Config c;
  const TaskSpec& ts = run.task;
  const ModelConfig& m = run.model;
  const TrainConfig& t = run.train;
  auto g17 = [](double v) { return fmt::format("{}", v); };
  auto list = [](const std::vector<std::size_t>& xs) { return fmt::format("{}", fmt::join(xs, ",")); };

  if (!run.version.empty()) c.set("version", run.version);
  c.set("out", run.out.string());
  c.set("seed", std::to_string(m.seed));
  c.set("precision", to_string(m.precision));
  c.set("task", to_string(ts.task));
  c.set("T", std::to_string(ts.T));
  c.set("G", std::to_string(ts.G));
  c.set("K", std::to_string(ts.K));
  c.set("noise", std::to_string(ts.noise_symbols));
  c.set("motif_len", std::to_string(ts.motif_len));
  c.set("n_train", std::to_string(ts.n_train));
  c.set("n_val", std::to_string(ts.n_val));
  c.set("n_test", std::to_string(ts.n_test));
  c.set("data_seed", std::to_string(ts.seed));
  if (!ts.data.empty()) c.set("data", ts.data);
  if (!ts.eval_data.empty()) c.set("eval_data", ts.eval_data);
  c.set("model", to_string(m.kind));
  c.set("depth", std::to_string(m.depth));
  c.set("hidden", list(m.hidden));
  c.set("k", std::to_string(m.nrnm.k));
  c.set("s", std::to_string(m.nrnm.s));
  c.set("win", std::to_string(m.nrnm.win));
  c.set("m", std::to_string(m.nrnm.m));
  c.set("heads", std::to_string(m.nrnm.heads));
  c.set("inject_layer", std::to_string(m.nrnm.inject_layer));
  if (!m.extra_inject_layers.empty()) c.set("extra_inject", list(m.extra_inject_layers));
  c.set("attn_scale", m.nrnm.scale == AttentionScale::FullWidth ? "full" : "per_head");
  c.set("order", std::to_string(m.order));
  c.set("dropout", g17(m.dropout));
  c.set("optimizer", to_string(t.optimizer));
  c.set("lr", g17(t.lr));
  c.set("beta1", g17(t.beta1));
  c.set("beta2", g17(t.beta2));
  c.set("eps", g17(t.eps));
  c.set("clip", g17(t.clip));
  c.set("epochs", std::to_string(t.epochs));
  c.set("batch", std::to_string(t.batch));
  c.set("eval_every", std::to_string(t.eval_every));
  return c;
}

}  // namespace nrnm
