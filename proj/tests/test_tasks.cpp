#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "nrnm/errors.hpp"
#include "nrnm/tasks.hpp"
#include "scratch.hpp"

using namespace nrnm;

namespace {

TaskSpec copy_spec(std::size_t T, std::size_t G, std::size_t K = 8) {
  TaskSpec s;
  s.task = TaskKind::CopyMemory;
  s.T = T;
  s.G = G;
  s.K = K;
  s.noise_symbols = 8;
  s.seed = 11;
  return s;
}

TaskSpec segment_spec(std::size_t T, std::size_t G, std::size_t K = 6) {
  TaskSpec s;
  s.task = TaskKind::SegmentOrder;
  s.T = T;
  s.G = G;
  s.K = K;
  s.motif_len = 3;
  s.seed = 5;
  return s;
}

std::size_t argmax_row(const Tensor& x, std::size_t t) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < x.dim(1); ++c)
    if (x.at(t, c) > x.at(t, best)) best = c;
  return best;
}

bool same_samples(const std::vector<Sample>& a, const std::vector<Sample>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i].label != b[i].label || !(a[i].x == b[i].x)) return false;
  return true;
}

// Exact matcher: compares the motif windows against every template.
int match_templates(const Sample& s, const TaskSpec& spec) {
  const auto motifs = motif_templates(spec);
  const std::size_t P = motifs.size(), L = spec.motif_len;
  auto which = [&](std::size_t start) -> std::size_t {
    for (std::size_t p = 0; p < P; ++p) {
      bool hit = true;
      for (std::size_t t = 0; t < L && hit; ++t)
        for (std::size_t c = 0; c < P && hit; ++c) hit = s.x.at(start + t, c) == motifs[p].at(t, c);
      if (hit) return p;
    }
    return P;
  };
  const std::size_t a = which(0), b = which(L + spec.G);
  if (a == P || b == P || a == b) return -1;
  return segment_label(a, b, P);
}

}  // namespace

TEST_CASE("copy_memory layout") {
  SUBCASE("gap 1 plants the label on the penultimate step") {
    auto spec = copy_spec(10, 1);
    for (std::size_t i = 0; i < 50; ++i) {
      Sample s = gen_copy_memory(spec, Split::Train, i);
      REQUIRE(s.x.shape() == Shape{10, 16});
      CHECK(argmax_row(s.x, 8) == static_cast<std::size_t>(s.label));
    }
  }
  SUBCASE("one-hot rows, distractors from the disjoint alphabet") {
    auto spec = copy_spec(30, 12);
    for (std::size_t i = 0; i < 50; ++i) {
      Sample s = gen_copy_memory(spec, Split::Val, i);
      for (std::size_t t = 0; t < 30; ++t) {
        double total = 0.0;
        for (std::size_t c = 0; c < 16; ++c) total += s.x.at(t, c);
        CHECK(total == 1.0);
        const std::size_t tok = argmax_row(s.x, t);
        if (t == 30 - 1 - 12) {
          CHECK(tok == static_cast<std::size_t>(s.label));
        } else {
          CHECK(tok >= 8);
        }
      }
    }
  }
  SUBCASE("fixed seed gives identical streams") {
    auto spec = copy_spec(20, 5);
    CHECK(same_samples(generate(spec, Split::Train, 40), generate(spec, Split::Train, 40)));
    auto other = spec;
    other.seed = 12;
    CHECK_FALSE(same_samples(generate(spec, Split::Train, 40), generate(other, Split::Train, 40)));
  }
  SUBCASE("invalid specs") {
    auto bad = copy_spec(10, 10);
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = copy_spec(10, 0);
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = copy_spec(10, 2, 1);
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = copy_spec(10, 2);
    bad.noise_symbols = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }
}

TEST_CASE("copy_memory labels are uniform") {
  // Chi-square goodness of fit, 7 dof; 18.475 is the p = 0.01 critical value.
  auto spec = copy_spec(12, 4);
  const std::size_t n = 10000;
  std::vector<double> counts(8, 0.0);
  for (const Sample& s : generate(spec, Split::Train, n)) counts[static_cast<std::size_t>(s.label)] += 1.0;
  double chi2 = 0.0;
  const double expected = static_cast<double>(n) / 8.0;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  MESSAGE("chi2 = " << chi2);
  CHECK(chi2 < 18.475);
}

TEST_CASE("copy_memory majority predictor is at chance") {
  auto spec = copy_spec(12, 4);
  auto train = generate(spec, Split::Train, 4000);
  auto test = generate(spec, Split::Test, 4000);
  std::vector<std::size_t> counts(8, 0);
  for (const Sample& s : train) ++counts[static_cast<std::size_t>(s.label)];
  const int majority = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  const double acc = static_cast<double>(std::count_if(test.begin(), test.end(),
                                                       [&](const Sample& s) { return s.label == majority; })) /
                     4000.0;
  const double sigma = std::sqrt(0.125 * 0.875 / 4000.0);
  CHECK(std::abs(acc - 0.125) < 4.0 * sigma);
}

TEST_CASE("adding labels") {
  CHECK(adding_label(0.9, 0.9) == 1);
  CHECK(adding_label(0.1, 0.2) == 0);
  CHECK(adding_label(0.5, 0.5) == 0);

  TaskSpec spec;
  spec.task = TaskKind::Adding;
  spec.T = 16;
  spec.G = 6;
  for (std::size_t i = 0; i < 200; ++i) {
    Sample s = gen_adding(spec, Split::Train, i);
    std::vector<std::size_t> marks;
    for (std::size_t t = 0; t < 16; ++t) {
      CHECK(s.x.at(t, 0) >= 0.0);
      CHECK(s.x.at(t, 0) <= 1.0);
      if (s.x.at(t, 1) == 1.0) marks.push_back(t);
      else CHECK(s.x.at(t, 1) == 0.0);
    }
    REQUIRE(marks.size() == 2);
    CHECK(marks[1] - marks[0] >= 6);
    CHECK(s.label == adding_label(s.x.at(marks[0], 0), s.x.at(marks[1], 0)));
  }
  spec.T = 3;
  CHECK_THROWS_AS(spec.validate(), ConfigError);
}

TEST_CASE("adding base rate") {
  TaskSpec spec;
  spec.task = TaskKind::Adding;
  spec.T = 4;
  spec.G = 1;
  const std::size_t n = 100000;
  std::size_t ones = 0;
  for (std::size_t i = 0; i < n; ++i) ones += static_cast<std::size_t>(gen_adding(spec, Split::Train, i).label);
  const double rate = static_cast<double>(ones) / static_cast<double>(n);
  MESSAGE("rate = " << rate);
  CHECK(std::abs(rate - 0.5) <= 0.01);
}

TEST_CASE("segment_order labels") {
  SUBCASE("label encoding is a bijection on ordered pairs") {
    for (std::size_t P : {2u, 3u, 4u}) {
      std::set<int> seen;
      for (std::size_t a = 0; a < P; ++a)
        for (std::size_t b = 0; b < P; ++b) {
          if (a == b) continue;
          const int label = segment_label(a, b, P);
          CHECK(label >= 0);
          CHECK(static_cast<std::size_t>(label) < P * (P - 1));
          CHECK(segment_pair(label, P) == std::pair<std::size_t, std::size_t>{a, b});
          CHECK(label != segment_label(b, a, P));
          seen.insert(label);
        }
      CHECK(seen.size() == P * (P - 1));
    }
  }
  SUBCASE("K must count ordered pairs") {
    CHECK_THROWS_AS(segment_spec(20, 4, 5).validate(), ConfigError);
    CHECK(motif_count(segment_spec(20, 4, 12)) == 4);
    CHECK_THROWS_AS(segment_spec(8, 4).validate(), ConfigError);
  }
  SUBCASE("templates are distinct +-1 patterns") {
    auto motifs = motif_templates(segment_spec(20, 4, 12));
    REQUIRE(motifs.size() == 4);
    for (std::size_t a = 0; a < 4; ++a) {
      CHECK(motifs[a].shape() == Shape{3, 5});
      for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(motifs[a].at(t, c)) == 1.0);
      for (std::size_t b = a + 1; b < 4; ++b) CHECK_FALSE(motifs[a] == motifs[b]);
    }
  }
}

TEST_CASE("segment_order layout") {
  SUBCASE("gap 0 puts the motifs next to each other") {
    auto spec = segment_spec(10, 0);
    auto motifs = motif_templates(spec);
    for (std::size_t i = 0; i < 30; ++i) {
      Sample s = gen_segment_order(spec, Split::Train, i);
      const auto [a, b] = segment_pair(s.label, 3);
      for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t c = 0; c < 3; ++c) {
          CHECK(s.x.at(t, c) == motifs[a].at(t, c));
          CHECK(s.x.at(3 + t, c) == motifs[b].at(t, c));
        }
    }
  }
  SUBCASE("gap and tail are noise in (-1, 1)") {
    auto spec = segment_spec(24, 7);
    for (std::size_t i = 0; i < 30; ++i) {
      Sample s = gen_segment_order(spec, Split::Train, i);
      for (std::size_t t = 0; t < 24; ++t) {
        const bool motif = t < 3 || (t >= 10 && t < 13);
        for (std::size_t c = 0; c < 3; ++c) {
          if (!motif) CHECK(std::abs(s.x.at(t, c)) < 1.0);
        }
        CHECK(std::abs(s.x.at(t, 3)) < 1.0);
      }
    }
  }
  SUBCASE("template matcher is exact") {
    for (std::size_t G : {0u, 4u, 15u}) {
      auto spec = segment_spec(30, G, 12);
      std::size_t correct = 0;
      const auto samples = generate(spec, Split::Test, 500);
      for (const Sample& s : samples) correct += match_templates(s, spec) == s.label;
      CHECK(correct == samples.size());
    }
  }
}

TEST_CASE("splits are disjoint") {
  SUBCASE("tiny copy task") {
    // 2 labels x 2 distractors over 2 free steps: only 8 distinct sequences.
    TaskSpec spec = copy_spec(3, 1, 2);
    spec.noise_symbols = 2;
    std::set<std::uint64_t> seen[3];
    for (Split split : {Split::Train, Split::Val, Split::Test})
      for (const Sample& s : generate(spec, split, 40)) seen[static_cast<int>(split)].insert(sample_hash(s));
    for (int a = 0; a < 3; ++a) {
      CHECK_FALSE(seen[a].empty());
      for (int b = a + 1; b < 3; ++b)
        for (auto h : seen[a]) CHECK(seen[b].count(h) == 0);
    }
  }
  SUBCASE("every generator") {
    TaskSpec add;
    add.task = TaskKind::Adding;
    add.T = 8;
    add.G = 2;
    for (const TaskSpec& spec : {copy_spec(10, 3), add, segment_spec(12, 2)}) {
      auto train = generate(spec, Split::Train, 200);
      auto val = generate(spec, Split::Val, 200);
      auto test = generate(spec, Split::Test, 200);
      std::set<std::uint64_t> tr;
      for (const auto& s : train) tr.insert(sample_hash(s));
      for (const auto& s : val) CHECK(tr.count(sample_hash(s)) == 0);
      for (const auto& s : test) CHECK(tr.count(sample_hash(s)) == 0);
    }
  }
}

TEST_CASE("batches pad to the longest sequence") {
  std::vector<Sample> samples(2);
  samples[0].x = Tensor({3, 2}, 1.0);
  samples[0].label = 1;
  samples[1].x = Tensor({5, 2}, 2.0);
  SequenceBatch b = make_batch(std::span<const Sample>(samples));
  CHECK(b.x.shape() == Shape{2, 5, 2});
  CHECK(b.lengths == std::vector<std::size_t>{3, 5});
  CHECK(b.labels == std::vector<int>{1, 0});
  CHECK(b.step(4).at(0, 0) == 0.0);
  CHECK(b.step(2).at(0, 1) == 1.0);
  CHECK(b.step(4).at(1, 1) == 2.0);
  CHECK_NOTHROW(b.validate(2));
  CHECK_THROWS_AS(b.validate(1), DimensionError);
  CHECK(make_batches(std::span<const Sample>(samples), 1).size() == 2);
  CHECK_THROWS_AS(make_batches(std::span<const Sample>(samples), 0), ConfigError);
}

TEST_CASE("external csv") {
  scratch::Dir dir("csv");

  SUBCASE("empty file warns") {
    auto data = load_external(dir.write("e.csv", ""), ExternalFormat::Csv);
    CHECK(data.samples.empty());
    REQUIRE(data.warnings.size() == 1);
    CHECK(data.warnings[0].find("empty") != std::string::npos);
    auto header_only = load_external(dir.write("h.csv", "seq_id,step,feat_0,label\n"), ExternalFormat::Csv);
    CHECK(header_only.samples.empty());
    CHECK(header_only.warnings.size() == 1);
  }
  SUBCASE("lengths 3 and 5 pad to 5") {
    auto path = dir.write("two.csv",
                          "seq_id,step,feat_0,feat_1,label\n"
                          "a,0,1,2,x\nb,0,1,1,y\na,2,5,6,x\na,1,3,4,x\n"
                          "b,1,2,2,y\nb,2,3,3,y\nb,3,4,4,y\nb,4,5,5,y\n");
    auto data = load_external(path, ExternalFormat::Csv);
    REQUIRE(data.samples.size() == 2);
    CHECK(data.ids == std::vector<std::string>{"a", "b"});
    CHECK(data.vocab.names == std::vector<std::string>{"x", "y"});
    CHECK(data.input_dim == 2);
    // rows reordered by step
    CHECK(data.samples[0].x.at(1, 0) == 3.0);
    CHECK(data.samples[0].x.at(2, 1) == 6.0);
    SequenceBatch b = make_batch(std::span<const Sample>(data.samples));
    CHECK(b.steps() == 5);
    CHECK(b.lengths == std::vector<std::size_t>{3, 5});
    CHECK(b.labels == std::vector<int>{0, 1});
  }
  SUBCASE("integer labels sort numerically") {
    auto v = LabelVocabulary::build({"10", "2", "1", "2"});
    CHECK(v.names == std::vector<std::string>{"1", "2", "10"});
    CHECK(v.index("10") == 2);
    CHECK(v.index("3") == -1);
    auto w = LabelVocabulary::build({"b", "10", "a"});
    CHECK(w.names == std::vector<std::string>{"10", "a", "b"});
  }

  auto parse_line = [&](const std::string& text) -> std::size_t {
    try {
      load_external(dir.write("bad.csv", text), ExternalFormat::Csv);
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find("bad.csv") != std::string::npos);
      return e.line();
    }
    FAIL("no parse error");
    return 0;
  };
  SUBCASE("errors carry line numbers") {
    const std::string header = "seq_id,step,feat_0,label\n";
    CHECK(parse_line(header + "a,0,1,x\na,1,2\n") == 3);
    CHECK(parse_line(header + "a,0,1,x\na,1,2,x,9\n") == 3);
    CHECK(parse_line(header + "a,0,1,x\nb,0,zz,x\n") == 3);
    CHECK(parse_line(header + "a,0,1,x\na,1,nan,x\n") == 3);
    CHECK(parse_line(header + "a,0,1,x\na,1,1,y\n") == 3);
    CHECK(parse_line(header + "a,0,1,x\na,0,1,x\n") == 3);
    CHECK(parse_line(header + "a,one,1,x\n") == 2);
    CHECK(parse_line("seq_id,feat_0,label\na,1,x\n") == 1);
  }
  SUBCASE("unknown label against a fixed vocabulary") {
    LabelVocabulary vocab{{"x"}};
    auto path = dir.write("eval.csv", "seq_id,step,feat_0,label\na,0,1,x\nb,0,1,z\n");
    try {
      load_external(path, ExternalFormat::Csv, {}, &vocab);
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(e.line() == 3);
      CHECK(std::string(e.what()).find("unknown label 'z'") != std::string::npos);
    }
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_external(dir / "nope.csv", ExternalFormat::Csv), ConfigError);
  }
}

TEST_CASE("external jsonl") {
  scratch::Dir dir("jsonl");
  auto data = load_external(dir.write("d.jsonl",
                                      "{\"id\": \"s1\", \"features\": [[1, 2], [3, 4]], \"label\": \"walk\"}\n"
                                      "\n"
                                      "{\"id\": 7, \"features\": [[5, 6]], \"label\": \"run\"}\n"),
                            ExternalFormat::Jsonl);
  REQUIRE(data.samples.size() == 2);
  CHECK(data.ids == std::vector<std::string>{"s1", "7"});
  CHECK(data.samples[0].label == 1);
  CHECK(data.samples[1].x.at(0, 1) == 6.0);

  auto line_of = [&](const std::string& text) -> std::size_t {
    try {
      load_external(dir.write("bad.jsonl", text), ExternalFormat::Jsonl);
    } catch (const ParseError& e) {
      return e.line();
    }
    return 0;
  };
  const std::string ok = "{\"features\": [[1, 2]], \"label\": 0}\n";
  CHECK(line_of(ok + "{\"features\": [[1, 2], [3]], \"label\": 0}\n") == 2);
  CHECK(line_of(ok + "{\"features\": [[1, \"a\"]], \"label\": 0}\n") == 2);
  CHECK(line_of(ok + ok + "{not json\n") == 3);
  CHECK(line_of("{\"features\": [[1]]}\n") == 1);
  CHECK(load_external(dir.write("empty.jsonl", "\n"), ExternalFormat::Jsonl).warnings.size() == 1);
}

TEST_CASE("export and reload is bit-identical") {
  scratch::Dir dir("roundtrip");
  TaskSpec add;
  add.task = TaskKind::Adding;
  add.T = 9;
  add.G = 2;
  for (const TaskSpec& spec : {add, segment_spec(14, 3), copy_spec(8, 2, 4)}) {
    // enough samples that every label appears, so the reloaded vocabulary is 0..K-1
    auto samples = generate(spec, Split::Train, 120);
    export_csv(samples, dir / "set.csv");
    export_jsonl(samples, dir / "set.jsonl");
    for (auto [file, fmt] : {std::pair{"set.csv", ExternalFormat::Csv}, std::pair{"set.jsonl", ExternalFormat::Jsonl}}) {
      auto data = load_external(dir / file, fmt);
      REQUIRE(data.vocab.size() == spec.classes());
      REQUIRE(data.samples.size() == samples.size());
      CHECK(same_samples(data.samples, samples));
      SequenceBatch a = make_batch(std::span<const Sample>(samples));
      SequenceBatch b = make_batch(std::span<const Sample>(data.samples));
      CHECK(a.x == b.x);
      CHECK(a.labels == b.labels);
    }
  }
}

TEST_CASE("external dataset split rule") {
  scratch::Dir dir("split");
  auto samples = generate(copy_spec(6, 2, 3), Split::Train, 30);
  export_csv(samples, dir / "all.csv");
  TaskSpec spec;
  spec.task = TaskKind::Csv;
  spec.data = (dir / "all.csv").string();
  Dataset ds = build_dataset(spec);
  CHECK(ds.train.size() == 24);
  CHECK(ds.val.size() == 3);
  CHECK(ds.test.size() == 3);
  CHECK(ds.val[0].x == samples[9].x);
  CHECK(ds.test[1].x == samples[18].x);
  CHECK(ds.classes == 3);
  CHECK(ds.input_dim == 11);

  export_csv(std::span<const Sample>(samples).first(5), dir / "eval.csv");
  spec.eval_data = (dir / "eval.csv").string();
  ds = build_dataset(spec);
  CHECK(ds.train.size() == 27);
  CHECK(ds.val.size() == 3);
  CHECK(ds.test.size() == 5);

  spec.data.clear();
  CHECK_THROWS_AS(build_dataset(spec), ConfigError);
}
