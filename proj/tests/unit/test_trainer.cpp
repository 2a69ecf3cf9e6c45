#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <vector>

#include "fedrank/data.hpp"
#include "fedrank/errors.hpp"
#include "fedrank/rng.hpp"
#include "fedrank/trainer.hpp"
#include "test_util.hpp"

using namespace fedrank;

namespace {

Dataset synthetic(int classes, std::size_t dims, std::size_t n, std::uint64_t seed,
                  double spread = 0.5, double scale = 2.0) {
  SyntheticSpec s;
  s.num_classes = classes;
  s.dims = dims;
  s.samples = n;
  s.seed = seed;
  s.cluster_spread = spread;
  s.mean_scale = scale;
  return make_synthetic(s);
}

ClientShard whole(const Dataset& ds) {
  ClientShard s;
  s.example_indices.resize(ds.size());
  std::iota(s.example_indices.begin(), s.example_indices.end(), std::size_t{0});
  return s;
}

// Scalar softmax-regression SGD written from the textbook update, replaying
// the documented batch schedule: rows shuffled by Rng(derive(seed, epoch)).
struct ScalarSoftmax {
  std::size_t d, C;
  std::vector<std::vector<double>> W;  // C x d
  std::vector<double> b;

  ScalarSoftmax(std::size_t dims, std::size_t classes)
      : d(dims), C(classes), W(classes, std::vector<double>(dims, 0.0)), b(classes, 0.0) {}

  std::vector<double> probs(const Dataset& ds, std::size_t r) const {
    std::vector<double> z(C);
    for (std::size_t c = 0; c < C; ++c) {
      z[c] = b[c];
      for (std::size_t k = 0; k < d; ++k) z[c] += W[c][k] * ds.features[r * d + k];
    }
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0;
    for (auto& v : z) s += (v = std::exp(v - m));
    for (auto& v : z) v /= s;
    return z;
  }

  // Returns per-batch pre-update losses.
  std::vector<double> epoch(const Dataset& ds, std::vector<std::size_t> rows, double lr,
                            std::size_t bs, std::uint64_t seed, std::size_t e) {
    Rng rng(derive_seed(seed, e));
    rng.shuffle(rows);
    std::vector<double> losses;
    for (std::size_t start = 0; start < rows.size(); start += bs) {
      const std::size_t end = std::min(rows.size(), start + bs);
      const double m = static_cast<double>(end - start);
      std::vector<std::vector<double>> gW(C, std::vector<double>(d, 0.0));
      std::vector<double> gb(C, 0.0);
      double loss = 0;
      for (std::size_t t = start; t < end; ++t) {
        const auto r = rows[t];
        const auto p = probs(ds, r);
        const auto y = static_cast<std::size_t>(ds.labels[r]);
        loss -= std::log(p[y]) / m;
        for (std::size_t c = 0; c < C; ++c) {
          const double delta = (p[c] - (c == y ? 1.0 : 0.0)) / m;
          gb[c] += delta;
          for (std::size_t k = 0; k < d; ++k) gW[c][k] += delta * ds.features[r * d + k];
        }
      }
      losses.push_back(loss);
      for (std::size_t c = 0; c < C; ++c) {
        b[c] -= lr * gb[c];
        for (std::size_t k = 0; k < d; ++k) W[c][k] -= lr * gW[c][k];
      }
    }
    return losses;
  }

  std::vector<double> flat() const {
    std::vector<double> out;
    for (const auto& row : W) out.insert(out.end(), row.begin(), row.end());
    out.insert(out.end(), b.begin(), b.end());
    return out;
  }
};

void check_close(const std::vector<double>& a, const std::vector<double>& b, double tol) {
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) <= tol);
}

}  // namespace

TEST_CASE("zero-initialized softmax regression probes at ln C") {
  for (int C : {2, 3, 10}) {
    const auto ds = synthetic(C, 3, 200, 1);
    const auto p0 = init_params(ModelKind::kSoftmaxRegression, 3, C, 0, 0);
    TrainConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.batch_size = 16;
    cfg.seed = 4;
    const auto probe = probe_epoch(p0, ds, whole(ds), cfg);
    CHECK(probe.probing_loss == doctest::Approx(std::log(static_cast<double>(C))).epsilon(1e-12));
    CHECK(probe.params == p0);
    // The first batch is evaluated before any update.
    cfg.learning_rate = 0.1;
    const auto moving = probe_epoch(p0, ds, whole(ds), cfg);
    CHECK(moving.batch_losses.front() ==
          doctest::Approx(std::log(static_cast<double>(C))).epsilon(1e-12));
  }
}

TEST_CASE("probe epoch matches a scalar SGD replay on a separable shard") {
  const auto ds = synthetic(3, 4, 300, 8, 0.2, 3.0);
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.batch_size = 32;
  cfg.seed = client_seed(99, 3, 2);
  ClientShard shard;
  for (std::size_t i = 0; i < ds.size(); i += 2) shard.example_indices.push_back(i);

  const auto p0 = init_params(ModelKind::kSoftmaxRegression, 4, 3, 0, 0);
  const auto probe = probe_epoch(p0, ds, shard, cfg);

  ScalarSoftmax oracle(4, 3);
  const auto losses = oracle.epoch(ds, shard.example_indices, 0.1, 32, cfg.seed, 0);
  const double mean = std::accumulate(losses.begin(), losses.end(), 0.0) / losses.size();
  CHECK(probe.batch_losses.size() == losses.size());
  CHECK(probe.probing_loss == doctest::Approx(mean).epsilon(1e-12));
  CHECK(probe.probing_loss < std::log(3.0));
  check_close(probe.params.weights, oracle.flat(), 1e-12);

  SUBCASE("finish_local_training continues with epochs 1 .. l_ep-1") {
    cfg.local_epochs = 3;
    const auto fin = finish_local_training(probe.params, ds, shard, cfg);
    oracle.epoch(ds, shard.example_indices, 0.1, 32, cfg.seed, 1);
    oracle.epoch(ds, shard.example_indices, 0.1, 32, cfg.seed, 2);
    CHECK(fin.epochs_run == 2);
    check_close(fin.params.weights, oracle.flat(), 1e-12);
  }
}

TEST_CASE("finish_local_training counts epochs and is a no-op at l_ep = 1") {
  const auto ds = synthetic(2, 2, 100, 3);
  TrainConfig cfg;
  cfg.batch_size = 30;  // 4 batches per epoch
  cfg.seed = 5;
  const auto p0 = init_params(ModelKind::kMlp1, 2, 2, 4, 9);
  const auto probe = probe_epoch(p0, ds, whole(ds), cfg);

  cfg.local_epochs = 1;
  const auto same = finish_local_training(probe.params, ds, whole(ds), cfg);
  CHECK(same.params == probe.params);
  CHECK(same.epochs_run == 0);
  CHECK(same.batches_run == 0);

  cfg.local_epochs = 5;
  const auto five = finish_local_training(probe.params, ds, whole(ds), cfg);
  CHECK(five.epochs_run == 4);
  CHECK(five.batches_run == 16);
}

TEST_CASE("batch_loss gradient matches central differences") {
  Rng pick(2024);
  for (int trial = 0; trial < 24; ++trial) {
    const auto kind = trial % 2 ? ModelKind::kMlp1 : ModelKind::kSoftmaxRegression;
    const std::size_t dims = 1 + pick.uniform_int(4);
    const int classes = 2 + static_cast<int>(pick.uniform_int(3));
    const auto ds = synthetic(classes, dims, 40, pick.next());
    auto params = init_params(kind, dims, static_cast<std::size_t>(classes), 3, pick.next());
    for (auto& w : params.weights) w = 0.5 * pick.normal();
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < 12; ++i) rows.push_back(pick.uniform_int(ds.size()));

    std::vector<double> grad(params.weights.size());
    batch_loss(params, ds, rows, grad);
    const double h = 1e-5;
    for (std::size_t i = 0; i < params.weights.size(); ++i) {
      auto plus = params, minus = params;
      plus.weights[i] += h;
      minus.weights[i] -= h;
      const double numeric =
          (batch_loss(plus, ds, rows, {}) - batch_loss(minus, ds, rows, {})) / (2 * h);
      CHECK(testutil::fd_err(grad[i], numeric) < 1e-4);
    }
  }
}

TEST_CASE("softmax outputs are distributions and losses are non-negative") {
  Rng pick(6);
  const auto ds = synthetic(4, 3, 50, 2);
  for (auto kind : {ModelKind::kSoftmaxRegression, ModelKind::kMlp1}) {
    auto params = init_params(kind, 3, 4, 5, 1);
    for (auto& w : params.weights) w = 3.0 * pick.normal();
    for (std::size_t r = 0; r < ds.size(); ++r) {
      const auto p = predict_proba(params, ds.row(r));
      CHECK(std::abs(std::accumulate(p.begin(), p.end(), 0.0) - 1.0) < 1e-9);
    }
    const auto ev = evaluate(params, ds);
    CHECK(ev.mean_loss >= 0.0);
    CHECK(ev.accuracy >= 0.0);
    CHECK(ev.accuracy <= 1.0);
  }
}

TEST_CASE("fedavg weighted means") {
  auto model = [](std::vector<double> w) {
    return ModelParams{ModelKind::kSoftmaxRegression, {static_cast<std::size_t>(w.size() - 1), 1}, w};
  };
  SUBCASE("equal weights") {
    const auto a = model({0, 2}), b = model({2, 0});
    const std::vector<ClientUpdate> ups{{0, &a, 1}, {1, &b, 1}};
    CHECK(fedavg_aggregate(ups).weights == std::vector<double>{1, 1});
  }
  SUBCASE("weights 1 and 3") {
    const auto a = model({0}), b = model({4});
    // shape {0, 1} is a degenerate but consistent descriptor for one weight
    const std::vector<ClientUpdate> ups{{0, &a, 1}, {1, &b, 3}};
    CHECK(fedavg_aggregate(ups).weights[0] == doctest::Approx(3.0).epsilon(1e-15));
  }
  SUBCASE("single update is returned unchanged") {
    Rng r(1);
    std::vector<double> w(9);
    for (auto& v : w) v = r.normal();
    const auto a = model(w);
    const std::vector<ClientUpdate> ups{{4, &a, 17}};
    CHECK(fedavg_aggregate(ups) == a);
  }
  SUBCASE("a consensus is returned exactly") {
    Rng r(2);
    std::vector<double> w(9);
    for (auto& v : w) v = r.normal();
    const auto a = model(w);
    std::vector<ClientUpdate> ups;
    for (std::size_t i = 0; i < 10; ++i) ups.push_back({i, &a, 3 + i});
    CHECK(fedavg_aggregate(ups) == a);
  }
  SUBCASE("order of updates does not matter") {
    const auto a = model({0.1, 0.7}), b = model({0.3, -1.1}), c = model({2.2, 0.05});
    const std::vector<ClientUpdate> fwd{{0, &a, 3}, {1, &b, 5}, {2, &c, 7}};
    const std::vector<ClientUpdate> rev{{2, &c, 7}, {0, &a, 3}, {1, &b, 5}};
    CHECK(fedavg_aggregate(fwd) == fedavg_aggregate(rev));
  }
  SUBCASE("shape mismatch names the client") {
    const auto a = model({0, 1}), b = model({0, 1, 2});
    const std::vector<ClientUpdate> ups{{0, &a, 1}, {7, &b, 1}};
    try {
      fedavg_aggregate(ups);
      FAIL("expected an aggregation error");
    } catch (const AggregationError& e) {
      CHECK(std::string(e.what()).find("client 7") != std::string::npos);
    }
    CHECK_THROWS_AS(fedavg_aggregate(std::vector<ClientUpdate>{}), AggregationError);
  }
}

TEST_CASE("fedavg is affine-equivariant") {
  Rng r(77);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + r.uniform_int(5), len = 1 + r.uniform_int(8);
    std::vector<ModelParams> ws, shifted;
    std::vector<double> bias(len);
    for (auto& v : bias) v = r.normal();
    const double a = 0.1 + 3 * r.uniform();
    for (std::size_t i = 0; i < n; ++i) {
      ModelParams m{ModelKind::kSoftmaxRegression, {len - 1, 1}, std::vector<double>(len)};
      for (auto& v : m.weights) v = r.normal();
      ws.push_back(m);
      for (std::size_t k = 0; k < len; ++k) m.weights[k] = a * m.weights[k] + bias[k];
      shifted.push_back(m);
    }
    std::vector<ClientUpdate> u1, u2;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t d = 1 + r.uniform_int(50);
      u1.push_back({i, &ws[i], d});
      u2.push_back({i, &shifted[i], d});
    }
    const auto g1 = fedavg_aggregate(u1), g2 = fedavg_aggregate(u2);
    for (std::size_t k = 0; k < len; ++k) {
      CHECK(std::abs(g2.weights[k] - (a * g1.weights[k] + bias[k])) < 1e-12 * (1 + std::abs(g2.weights[k])) * 10);
    }
  }
}

TEST_CASE("evaluate breaks ties to the lowest class and matches a hand forward pass") {
  const auto ds = synthetic(2, 2, 100, 1);
  const auto zero = init_params(ModelKind::kSoftmaxRegression, 2, 2, 0, 0);
  CHECK(evaluate(zero, ds).accuracy == 0.5);
  CHECK(evaluate(zero, ds).mean_loss == doctest::Approx(std::log(2.0)));

  // One feature, two classes: logits (x, -x).
  Dataset tiny;
  tiny.dims = 1;
  tiny.num_classes = 2;
  tiny.features = {1.0, -2.0, 0.5, -0.5};
  tiny.labels = {0, 1, 1, 1};
  const ModelParams p{ModelKind::kSoftmaxRegression, {1, 2}, {1.0, -1.0, 0.0, 0.0}};
  const auto ev = evaluate(p, tiny);
  CHECK(ev.accuracy == 0.75);
  // Loss per row: log(1 + exp(-2 y_sign x)) with y_sign = +1 for class 0.
  const double expect = (std::log1p(std::exp(-2.0)) + std::log1p(std::exp(-4.0)) +
                         std::log1p(std::exp(1.0)) + std::log1p(std::exp(-1.0))) /
                        4.0;
  CHECK(ev.mean_loss == doctest::Approx(expect).epsilon(1e-12));

  SUBCASE("a separating model scores 1.0") {
    Dataset sep = tiny;
    sep.labels = {0, 1, 0, 1};
    CHECK(evaluate(p, sep).accuracy == 1.0);
  }
}

TEST_CASE("weight divergence") {
  const ModelParams g{ModelKind::kSoftmaxRegression, {1, 1}, {0, 0}};
  const ModelParams l{ModelKind::kSoftmaxRegression, {1, 1}, {3, 4}};
  CHECK(weight_divergence(g, std::vector<ModelParams>{l}) == 5.0);
  CHECK(weight_divergence(g, std::vector<ModelParams>{g, g}) == 0.0);
  const ModelParams a{ModelKind::kSoftmaxRegression, {1, 1}, {1, 1}};
  const ModelParams b{ModelKind::kSoftmaxRegression, {1, 1}, {-2, 0}};
  const ModelParams c{ModelKind::kSoftmaxRegression, {1, 1}, {0, -1.5}};
  CHECK(weight_divergence(g, std::vector<ModelParams>{a, b, c}) == doctest::Approx(2.0));
  const ModelParams bad{ModelKind::kSoftmaxRegression, {2, 1}, {0, 0, 0}};
  CHECK_THROWS(weight_divergence(g, std::vector<ModelParams>{bad}));
}

TEST_CASE("numeric blowup carries the batch index") {
  Dataset ds;
  ds.dims = 1;
  ds.num_classes = 2;
  for (int i = 0; i < 8; ++i) {
    ds.features.push_back(i < 4 ? 1.0 : 1e308);
    ds.labels.push_back(i % 2);
  }
  ClientShard shard;
  for (std::size_t i = 0; i < 8; ++i) shard.example_indices.push_back(i);
  TrainConfig cfg;
  cfg.batch_size = 1;
  cfg.learning_rate = 1e10;
  cfg.seed = 1;
  const auto p0 = init_params(ModelKind::kSoftmaxRegression, 1, 2, 0, 0);
  try {
    probe_epoch(p0, ds, shard, cfg);
    FAIL("expected a numeric error");
  } catch (const NumericError& e) {
    CHECK(e.batch_index() < 8);
  }
}

TEST_CASE("model checkpoints round-trip") {
  const auto dir = testutil::temp_dir("model");
  auto p = init_params(ModelKind::kMlp1, 3, 4, 5, 11);
  for (std::size_t i = 0; i < p.weights.size(); ++i) p.weights[i] += 1e-3 * static_cast<double>(i);
  save_model(dir / "m.bin", p);
  CHECK(load_model(dir / "m.bin") == p);
  {
    std::ofstream(dir / "junk.bin") << "not a model";
  }
  CHECK_THROWS_AS(load_model(dir / "junk.bin"), ParseError);
}
