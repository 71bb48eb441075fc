#include <cmath>
#include <sstream>

#include "doctest.h"
#include "nrnm/errors.hpp"
#include "nrnm/training.hpp"
#include "oracles.hpp"
#include "scratch.hpp"

using namespace nrnm;

namespace {

ModelConfig tiny_model(ModelKind kind, std::size_t D, std::size_t K, std::uint64_t seed) {
  ModelConfig c;
  c.kind = kind;
  c.depth = 2;
  c.hidden = {8};
  c.input_dim = D;
  c.classes = K;
  c.nrnm.k = 4;
  c.nrnm.win = 2;
  c.nrnm.m = 8;
  c.nrnm.heads = 2;
  c.nrnm.inject_layer = 1;
  c.dropout = 0.0;
  c.seed = seed;
  return c;
}

// Class 0 drifts towards (+1, +0.5), class 1 towards (-1, -0.5), with noise
// small enough that the step-mean features are separated by a margin.
std::vector<Sample> separable_set(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Sample> out;
  for (std::size_t i = 0; i < n; ++i) {
    Sample s;
    s.label = static_cast<int>(i % 2);
    const double sign = s.label == 0 ? 1.0 : -1.0;
    s.x = Tensor({5, 2});
    for (std::size_t t = 0; t < 5; ++t) {
      s.x.at(t, 0) = sign * 1.0 + rng.uniform(-0.3, 0.3);
      s.x.at(t, 1) = sign * 0.5 + rng.uniform(-0.3, 0.3);
    }
    out.push_back(std::move(s));
  }
  return out;
}

// Plain logistic regression on the step-mean features by gradient descent.
double logistic_accuracy(const std::vector<Sample>& samples) {
  double w0 = 0.0, w1 = 0.0, b = 0.0;
  auto mean = [](const Sample& s, std::size_t c) {
    double m = 0.0;
    for (std::size_t t = 0; t < s.x.dim(0); ++t) m += s.x.at(t, c);
    return m / static_cast<double>(s.x.dim(0));
  };
  for (int it = 0; it < 500; ++it) {
    double g0 = 0.0, g1 = 0.0, gb = 0.0;
    for (const Sample& s : samples) {
      const double p = oracle::sigmoid(w0 * mean(s, 0) + w1 * mean(s, 1) + b);
      const double err = p - (s.label == 1 ? 1.0 : 0.0);
      g0 += err * mean(s, 0);
      g1 += err * mean(s, 1);
      gb += err;
    }
    w0 -= 0.5 * g0 / static_cast<double>(samples.size());
    w1 -= 0.5 * g1 / static_cast<double>(samples.size());
    b -= 0.5 * gb / static_cast<double>(samples.size());
  }
  std::size_t correct = 0;
  for (const Sample& s : samples) correct += ((w0 * mean(s, 0) + w1 * mean(s, 1) + b > 0.0) ? 1 : 0) == s.label;
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

Dataset copy_dataset(std::size_t n_train, std::uint64_t seed) {
  TaskSpec spec;
  spec.task = TaskKind::CopyMemory;
  spec.T = 10;
  spec.G = 4;
  spec.K = 4;
  spec.noise_symbols = 4;
  spec.n_train = n_train;
  spec.n_val = 16;
  spec.n_test = 16;
  spec.seed = seed;
  return build_dataset(spec);
}

// Metrics with the wall_ms column blanked.
std::string strip_wall(const std::string& csv) {
  std::istringstream in(csv);
  std::string line, out;
  while (std::getline(in, line)) {
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    REQUIRE(f.size() == 7);
    f[5] = "-";
    for (std::size_t i = 0; i < f.size(); ++i) out += (i ? "," : "") + f[i];
    out += '\n';
  }
  return out;
}

double batch_loss(SequenceModel& model, const SequenceBatch& batch) {
  Graph g(model.config().precision, false);
  return nll_loss(model.forward(g, batch).logits, batch.labels).value().item();
}

}  // namespace

TEST_CASE("adam") {
  TrainConfig cfg;
  SUBCASE("zero gradient is a fixed point") {
    ParameterStore store;
    Rng rng(1);
    auto& p = store.add("p", oracle::random_tensor({3, 4}, rng));
    const Tensor before = p.value;
    AdamState st;
    for (int i = 0; i < 5; ++i) adam_step(store, st, cfg);
    CHECK(p.value == before);
  }
  SUBCASE("constant gradient steps approach lr") {
    ParameterStore store;
    auto& p = store.add("p", Tensor::vector({0.0, 0.0}));
    p.grad = Tensor::vector({0.3, -7.0});
    AdamState st;
    double prev0 = 0.0, prev1 = 0.0;
    for (int i = 0; i < 2000; ++i) {
      prev0 = p.value[0];
      prev1 = p.value[1];
      adam_step(store, st, cfg);
    }
    CHECK(std::abs((prev0 - p.value[0]) - cfg.lr) < 1e-7);
    CHECK(std::abs((p.value[1] - prev1) - cfg.lr) < 1e-7);
  }
  SUBCASE("three steps on a scalar quadratic match the hand recurrence") {
    // loss = 0.5 * a * (p - c)^2
    const double a = 2.5, c = 0.7, lr = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    cfg.lr = lr;
    ParameterStore store;
    auto& p = store.add("p", Tensor::vector({-1.3}));
    AdamState st;
    double x = -1.3, m = 0.0, v = 0.0;
    for (int t = 1; t <= 3; ++t) {
      const double g = a * (x - c);
      p.grad = Tensor::vector({a * (p.value[0] - c)});
      adam_step(store, st, cfg);
      m = b1 * m + (1 - b1) * g;
      v = b2 * v + (1 - b2) * g * g;
      const double mhat = m / (1 - std::pow(b1, t)), vhat = v / (1 - std::pow(b2, t));
      x -= lr * mhat / (std::sqrt(vhat) + eps);
      CHECK(std::abs(p.value[0] - x) < 1e-12);
    }
    CHECK(st.t == 3);
  }
  SUBCASE("non-finite gradient names the parameter and leaves values alone") {
    ParameterStore store;
    auto& a = store.add("alpha", Tensor::vector({1.0}));
    auto& b = store.add("beta", Tensor::vector({2.0}));
    a.grad = Tensor::vector({0.5});
    b.grad = Tensor::vector({std::nan("")});
    AdamState st;
    try {
      adam_step(store, st, cfg);
      FAIL("expected NumericError");
    } catch (const NumericError& e) {
      CHECK(std::string(e.what()).find("beta") != std::string::npos);
    }
    CHECK(a.value[0] == 1.0);
    CHECK_THROWS_AS(sgd_step(store, cfg), NumericError);
  }
}

TEST_CASE("gradient clipping") {
  SUBCASE("3-4-5") {
    Tensor g = Tensor::vector({3.0, 4.0});
    std::vector<Tensor*> gs{&g};
    CHECK(clip_gradients(gs, 1.0) == 5.0);
    CHECK(std::abs(g[0] - 0.6) < 1e-15);
    CHECK(std::abs(g[1] - 0.8) < 1e-15);
  }
  SUBCASE("within the bound is untouched") {
    Tensor g = Tensor::vector({0.3, 0.4});
    const Tensor before = g;
    std::vector<Tensor*> gs{&g};
    CHECK(clip_gradients(gs, 1.0) == doctest::Approx(0.5));
    CHECK(g == before);
  }
  SUBCASE("random gradients") {
    Rng rng(10);
    for (int trial = 0; trial < 50; ++trial) {
      Tensor a = oracle::random_tensor({3, 5}, rng, -3, 3), b = oracle::random_tensor({7}, rng, -3, 3);
      const Tensor a0 = a, b0 = b;
      double pre = 0.0;
      for (double v : a.storage()) pre += v * v;
      for (double v : b.storage()) pre += v * v;
      pre = std::sqrt(pre);
      const double max_norm = rng.uniform(0.5, 12.0);
      std::vector<Tensor*> gs{&a, &b};
      CHECK(std::abs(clip_gradients(gs, max_norm) - pre) < 1e-12);
      double post = 0.0, dot = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        post += a[i] * a[i];
        dot += a[i] * a0[i];
      }
      for (std::size_t i = 0; i < b.size(); ++i) {
        post += b[i] * b[i];
        dot += b[i] * b0[i];
      }
      post = std::sqrt(post);
      CHECK(std::abs(post - std::min(pre, max_norm)) < 1e-12);
      CHECK(post <= pre + 1e-15);
      CHECK(std::abs(dot / (post * pre) - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.lr = 0.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.clip = -1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.batch = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK(parse_optimizer("sgd") == OptimizerKind::Sgd);
  CHECK_THROWS_AS(parse_optimizer("rmsprop"), ConfigError);
}

TEST_CASE("zero epochs keeps the initialization") {
  scratch::Dir dir("zero");
  Dataset ds = copy_dataset(20, 3);
  SequenceModel model(tiny_model(ModelKind::Nrnm, ds.input_dim, ds.classes, 4));
  const auto init = model.params().snapshot();
  TrainConfig cfg;
  cfg.epochs = 0;
  cfg.out = dir.path();
  TrainResult r = train(model, ds, cfg);
  CHECK(r.history.empty());
  CHECK(r.steps == 0);
  CHECK(scratch::read_file(dir / "metrics.csv") == std::string(kMetricsHeader) + "\n");
  SequenceModel reloaded(tiny_model(ModelKind::Nrnm, ds.input_dim, ds.classes, 99));
  load_checkpoint(reloaded.params(), dir / "checkpoint_best.bin");
  CHECK(reloaded.params().snapshot() == init);
  load_checkpoint(reloaded.params(), dir / "checkpoint_last.bin");
  CHECK(reloaded.params().snapshot() == init);
}

TEST_CASE("separable toy set is learned") {
  Dataset ds;
  ds.train = separable_set(64, 7);
  ds.input_dim = 2;
  ds.classes = 2;
  REQUIRE(logistic_accuracy(ds.train) == 1.0);
  auto mc = tiny_model(ModelKind::Lstm, 2, 2, 8);
  mc.depth = 1;
  mc.hidden = {4};
  SequenceModel model(mc);
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.batch = 8;
  cfg.lr = 0.01;
  TrainResult r = train(model, ds, cfg);
  double best = 0.0;
  for (const auto& row : r.history)
    if (row.split == "train") best = std::max(best, row.accuracy);
  CHECK(best >= 0.99);
  CHECK(evaluate(model, ds.train, 16).accuracy >= 0.99);
}

TEST_CASE("training is deterministic") {
  scratch::Dir dir("det");
  Dataset ds = copy_dataset(48, 5);
  std::string runs[2];
  for (int i = 0; i < 2; ++i) {
    auto mc = tiny_model(ModelKind::Nrnm, ds.input_dim, ds.classes, 11);
    mc.dropout = 0.25;
    SequenceModel model(mc);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch = 16;
    cfg.seed = 42;
    cfg.out = dir / ("run" + std::to_string(i));
    train(model, ds, cfg);
    runs[i] = scratch::read_file(cfg.out / "metrics.csv");
  }
  CHECK(runs[0].rfind(kMetricsHeader, 0) == 0);
  // header, 3 x (train, val), test
  CHECK(std::count(runs[0].begin(), runs[0].end(), '\n') == 8);
  CHECK(strip_wall(runs[0]) == strip_wall(runs[1]));
}

TEST_CASE("a small step decreases the batch loss") {
  Dataset ds = copy_dataset(16, 9);
  SequenceBatch batch = make_batch(std::span<const Sample>(ds.train));
  for (OptimizerKind opt : {OptimizerKind::Sgd, OptimizerKind::Adam}) {
    for (std::uint64_t trial = 0; trial < 10; ++trial) {
      SequenceModel model(tiny_model(ModelKind::Nrnm, ds.input_dim, ds.classes, 200 + trial));
      const double before = batch_loss(model, batch);
      Graph g;
      Var loss = nll_loss(model.forward(g, batch).logits, batch.labels);
      model.params().zero_grad();
      g.backward(loss);
      TrainConfig cfg;
      cfg.optimizer = opt;
      cfg.lr = 1e-5;
      if (opt == OptimizerKind::Adam) {
        AdamState st;
        adam_step(model.params(), st, cfg);
      } else {
        sgd_step(model.params(), cfg);
      }
      CHECK(batch_loss(model, batch) < before);
    }
  }
}

TEST_CASE("checkpoint round trip reproduces eval exactly") {
  scratch::Dir dir("ckpt");
  Dataset ds = copy_dataset(32, 13);
  for (Precision prec : {Precision::F64, Precision::F32}) {
    auto mc = tiny_model(ModelKind::Nrnm, ds.input_dim, ds.classes, 21);
    mc.precision = prec;
    SequenceModel model(mc);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch = 8;
    cfg.out = dir / (prec == Precision::F64 ? "f64" : "f32");
    train(model, ds, cfg);
    const EvalResult a = evaluate(model, ds.test, 8);
    mc.seed = 1234;
    SequenceModel fresh(mc);
    CHECK(load_checkpoint(fresh.params(), cfg.out / "checkpoint_best.bin") == prec);
    const EvalResult b = evaluate(fresh, ds.test, 8);
    CHECK(a.loss == b.loss);
    CHECK(a.accuracy == b.accuracy);
  }
}

TEST_CASE("divergence aborts with the last finite checkpoint") {
  scratch::Dir dir("nan");
  Dataset ds = copy_dataset(32, 17);
  SequenceModel model(tiny_model(ModelKind::Lstm, ds.input_dim, ds.classes, 5));
  std::vector<Tensor> at_abort;
  std::size_t batches = 0;
  TrainObserver obs;
  obs.on_batch = [&](Graph&, const ForwardResult&, const std::vector<BlockTrace>&) {
    if (++batches == 3) {
      at_abort = model.params().snapshot();
      throw NumericError("loss is not finite");
    }
  };
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch = 8;
  cfg.out = dir.path();
  CHECK_THROWS_AS(train(model, ds, cfg, &obs), NumericError);
  SequenceModel reloaded(tiny_model(ModelKind::Lstm, ds.input_dim, ds.classes, 6));
  load_checkpoint(reloaded.params(), dir / "checkpoint_last.bin");
  CHECK(reloaded.params().snapshot() == at_abort);
  for (const Tensor& t : at_abort) CHECK(t.all_finite());
}

TEST_CASE("metric rows") {
  MetricRow row{3, 120, "val", 0.1, 0.75, 12.3456, 7};
  CHECK(format_metric_row(row) == "3,120,val,0.10000000000000001,0.75,12.346,7");
}
