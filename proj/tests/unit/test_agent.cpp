#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "fedrank/agent.hpp"
#include "fedrank/errors.hpp"
#include "test_util.hpp"

using namespace fedrank;

namespace {

StateMatrix random_states(Rng& r, std::size_t n) {
  StateMatrix s;
  s.values.resize(n * kStateDims);
  for (auto& v : s.values) v = r.normal();
  return s;
}

std::vector<std::uint8_t> random_mask(Rng& r, std::size_t n, std::size_t k) {
  std::vector<std::size_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = i;
  r.shuffle(ids);
  std::vector<std::uint8_t> m(n, 0);
  for (std::size_t i = 0; i < k; ++i) m[ids[i]] = 1;
  return m;
}

Transition random_transition(Rng& r, std::size_t n, std::size_t k, bool terminal = false) {
  return {random_states(r, n), random_mask(r, n, k), r.normal(), random_states(r, n), terminal};
}

// Net whose every output is the constant `bias`.
QNetwork constant_net(double bias) {
  QNetwork net(2, 2, 1, 0.0);
  auto p = net.params();
  std::fill(p.begin(), p.end(), 0.0);
  p.back() = bias;
  net.sync_target();
  return net;
}

std::vector<const Transition*> ptrs(const std::vector<Transition>& ts) {
  std::vector<const Transition*> out;
  for (const auto& t : ts) out.push_back(&t);
  return out;
}

}  // namespace

TEST_CASE("state normalization") {
  std::vector<CandidateObservation> obs(2);
  obs[0] = {0, 0.0, 1.0, 3.0, 1.0, 0.5, 10, {}};
  obs[1] = {1, 2.0, 1.0, 5.0, 1.0, 0.5, 10, {}};
  const auto s = normalize_states(obs);
  CHECK(s.rows() == 2);
  CHECK(s.row(0)[0] == -1.0);
  CHECK(s.row(1)[0] == 1.0);
  CHECK(s.row(0)[1] == 0.0);  // constant column
  CHECK(s.row(1)[5] == 0.0);
  CHECK(s.row(0)[2] == -1.0);

  Rng r(3);
  std::vector<CandidateObservation> many(17);
  for (auto& o : many) {
    o.t_comp = r.uniform();
    o.t_comm = r.uniform() * 4;
    o.e_comp = r.normal();
    o.e_comm = r.uniform();
    o.probing_loss = r.uniform();
    o.data_size = 1 + r.uniform_int(50);
  }
  const auto z = normalize_states(many);
  for (std::size_t k = 0; k < kStateDims; ++k) {
    double mean = 0, sq = 0;
    for (std::size_t i = 0; i < 17; ++i) {
      mean += z.row(i)[k] / 17;
      sq += z.row(i)[k] * z.row(i)[k] / 17;
    }
    CHECK(std::abs(mean) < 1e-9);
    CHECK(std::abs(sq - 1.0) < 1e-9);
  }
}

TEST_CASE("Q-network forward pass") {
  SUBCASE("all-zero weights give zero") {
    const auto net = constant_net(0.0);
    Rng r(1);
    const auto s = random_states(r, 5);
    for (double q : net.forward_all(s)) CHECK(q == 0.0);
  }
  SUBCASE("hand-computed single-unit network") {
    QNetwork net(1, 1, 4, 0.0);
    auto p = net.params();
    // W1 (6), b1, W2 (1), b2, w3 (1), b3
    const double w1[6] = {0.1, -0.2, 0.3, 0.0, 0.5, -0.1};
    std::copy(w1, w1 + 6, p.begin());
    p[6] = 0.05;   // b1
    p[7] = 0.7;    // W2
    p[8] = -0.1;   // b2
    p[9] = 1.5;    // w3
    p[10] = 0.2;   // b3
    const std::vector<double> x{1, 2, 3, 4, 5, 6};
    const double h1 = std::tanh(0.1 - 0.4 + 0.9 + 0.0 + 2.5 - 0.6 + 0.05);
    const double h2 = std::tanh(0.7 * h1 - 0.1);
    CHECK(net.forward(x) == doctest::Approx(1.5 * h2 + 0.2).epsilon(1e-14));
    CHECK(net.forward(x, true) != net.forward(x));
    net.sync_target();
    CHECK(net.forward(x, true) == net.forward(x));
  }
  SUBCASE("output layer starts small") {
    QNetwork net(64, 64, 9, 0.01);
    Rng r(2);
    const auto s = random_states(r, 20);
    for (double q : net.forward_all(s)) CHECK(std::abs(q) < 0.01 * 64 + 1e-12);
    CHECK(std::equal(net.params().begin(), net.params().end(), net.target_params().begin()));
  }
}

TEST_CASE("vdn total") {
  const std::vector<double> q{1, 2, 3};
  CHECK(vdn_total(q, std::vector<std::uint8_t>{1, 0, 1}) == 4.0);
  CHECK(vdn_total(q, std::vector<std::uint8_t>{0, 0, 0}) == 0.0);
  const std::vector<double> qp{3, 1, 2};
  CHECK(vdn_total(qp, std::vector<std::uint8_t>{1, 1, 0}) == 4.0);
  CHECK_THROWS_AS(vdn_total(q, std::vector<std::uint8_t>{1}), InvalidAction);
}

TEST_CASE("greedy top-K selection") {
  Rng rng(1);
  const std::vector<double> q{0.1, 0.9, 0.5};
  CHECK(select_topk(q, 1, 0.0, rng).selected() == std::vector<std::size_t>{1});
  CHECK(select_topk(q, 3, 1.0, rng).count() == 3);
  const std::vector<double> tie{1.0, 2.0, 2.0, 0.0};
  CHECK(select_topk(tie, 1, 0.0, rng).selected() == std::vector<std::size_t>{1});
}

TEST_CASE("top-K selection is invariant under strictly increasing transforms") {
  Rng r(123);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 2 + r.uniform_int(30), k = 1 + r.uniform_int(n);
    std::vector<double> q(n), shifted(n), cubed(n), exped(n);
    const double c = 10 * r.normal();
    for (std::size_t i = 0; i < n; ++i) {
      q[i] = r.normal();
      shifted[i] = q[i] + c;
      cubed[i] = q[i] * q[i] * q[i];
      exped[i] = std::exp(q[i]);
    }
    const double eps = r.uniform() < 0.5 ? 0.0 : r.uniform();
    const std::uint64_t seed = r.next();
    Rng a(seed), b(seed), cr(seed), d(seed);
    const auto base = select_topk(q, k, eps, a);
    CHECK(base.count() == k);
    CHECK(select_topk(shifted, k, eps, b).mask == base.mask);
    CHECK(select_topk(cubed, k, eps, cr).mask == base.mask);
    CHECK(select_topk(exped, k, eps, d).mask == base.mask);
  }
}

TEST_CASE("exploration swaps some top-K devices for unselected ones") {
  Rng r(77);
  const std::vector<double> q{9, 8, 7, 6, 5, 4, 3, 2, 1, 0};
  int changed = 0;
  for (int t = 0; t < 200; ++t) {
    const auto d = select_topk(q, 4, 1.0, r);
    CHECK(d.count() == 4);
    std::size_t kept = 0;
    for (std::size_t i = 0; i < 4; ++i) kept += d.mask[i];
    CHECK(kept < 4);
    CHECK(kept >= 0);
    changed += kept < 4;
    for (std::size_t rnk = 0; rnk < 4; ++rnk) CHECK(d.mask[d.order[rnk]] == 1);
  }
  CHECK(changed == 200);
  // One uniform() is consumed even without exploration.
  Rng a(5), b(5);
  select_topk(q, 4, 0.0, a);
  b.uniform();
  CHECK(a.state() == b.state());
}

TEST_CASE("profiler cache is a FIFO ring") {
  ProfilerCache cache(5);
  for (int i = 0; i < 8; ++i) cache.push({{}, {}, static_cast<double>(i), {}, false});
  CHECK(cache.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) CHECK(cache.at(i).reward == 3.0 + static_cast<double>(i));
  Rng a(4), b(4);
  const auto s1 = cache.sample(20, a), s2 = cache.sample(20, b);
  CHECK(s1 == s2);
  CHECK_THROWS_AS(cache.push({{}, {}, std::nan(""), {}, false}), NumericError);
  CHECK_THROWS_AS(ProfilerCache(0), InvalidSpec);
}

TEST_CASE("TD loss examples") {
  SUBCASE("r = 1, gamma = 0.9, next value 2, prediction 2") {
    const auto net = constant_net(2.0);
    Rng r(1);
    std::vector<Transition> ts{random_transition(r, 4, 1)};
    ts[0].reward = 1.0;
    CHECK(td_loss(ptrs(ts), net, 0.9).loss == doctest::Approx(0.64).epsilon(1e-12));
  }
  SUBCASE("gamma = 0 makes the target the reward") {
    Rng r(2);
    QNetwork net(8, 8, 3, 0.5);
    for (int i = 0; i < 20; ++i) {
      std::vector<Transition> ts{random_transition(r, 6, 2)};
      double yhat = 0;
      const auto q = net.forward_all(ts[0].state);
      for (std::size_t d = 0; d < 6; ++d) {
        if (ts[0].action[d]) yhat += q[d];
      }
      const double err = ts[0].reward - yhat;
      CHECK(td_loss(ptrs(ts), net, 0.0).loss == doctest::Approx(err * err).epsilon(1e-12));
    }
  }
  SUBCASE("terminal transitions ignore the next state") {
    const auto net = constant_net(1.0);
    Rng r(3);
    std::vector<Transition> ts{random_transition(r, 5, 2, true)};
    ts[0].reward = 0.5;
    CHECK(td_loss(ptrs(ts), net, 0.9).loss == doctest::Approx(2.25).epsilon(1e-12));
  }
  SUBCASE("target uses the target network's own top-K") {
    QNetwork net(4, 4, 5, 0.5);
    Rng r(6);
    std::vector<Transition> ts{random_transition(r, 7, 3)};
    auto q_next = net.forward_all(ts[0].next_state, true);
    std::sort(q_next.rbegin(), q_next.rend());
    const double y = ts[0].reward + 0.8 * (q_next[0] + q_next[1] + q_next[2]);
    const auto q = net.forward_all(ts[0].state);
    double yhat = 0;
    for (std::size_t d = 0; d < 7; ++d) {
      if (ts[0].action[d]) yhat += q[d];
    }
    CHECK(td_loss(ptrs(ts), net, 0.8).loss ==
          doctest::Approx((y - yhat) * (y - yhat)).epsilon(1e-12));
  }
  CHECK_THROWS_AS(td_loss({}, constant_net(0.0), 0.5), InvalidSpec);
}

TEST_CASE("TD gradient matches central differences") {
  Rng r(2025);
  for (int trial = 0; trial < 20; ++trial) {
    QNetwork net(5, 4, r.next(), 0.5);
    // decouple theta from the target so the target stays fixed during FD
    for (auto& w : net.params()) w += 0.1 * r.normal();
    std::vector<Transition> ts;
    const std::size_t batch = 1 + r.uniform_int(4);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t n = 3 + r.uniform_int(5);
      ts.push_back(random_transition(r, n, 1 + r.uniform_int(n - 1), r.uniform() < 0.2));
    }
    const double gamma = r.uniform() * 0.99;
    const auto lg = td_loss(ptrs(ts), net, gamma);
    const double h = 1e-5;
    for (std::size_t i = 0; i < net.parameter_count(); ++i) {
      const double keep = net.params()[i];
      net.params()[i] = keep + h;
      const double up = td_loss(ptrs(ts), net, gamma).loss;
      net.params()[i] = keep - h;
      const double down = td_loss(ptrs(ts), net, gamma).loss;
      net.params()[i] = keep;
      CHECK(testutil::fd_err(lg.grad[i], (up - down) / (2 * h)) < 1e-4);
    }
  }
}

TEST_CASE("pairwise probabilities") {
  CHECK(pairwise_probability(0.3, 0.3) == 0.5);
  CHECK(testutil::rel_err(pairwise_probability(std::log(3.0), 0.0), 0.75) < 1e-12);
  CHECK(pairwise_probability(800, 0) == 1.0);
  CHECK(pairwise_probability(-800, 0) == 0.0);
  Rng r(9);
  for (int t = 0; t < 1000; ++t) {
    const double a = 20 * r.normal(), b = 20 * r.normal();
    CHECK(std::abs(pairwise_probability(a, b) + pairwise_probability(b, a) - 1.0) <= 1e-12);
  }
}

TEST_CASE("rank loss examples") {
  const std::vector<DevicePair> one{{0, 1}};
  const std::vector<double> q{0.4, 0.4};
  CHECK(rank_loss(q, q, one).loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  const std::vector<double> far{40.0, 0.0};
  CHECK(rank_loss(far, far, one).loss < 1e-6);
  const std::vector<double> ones{1.0};
  CHECK(pairwise_bce(std::vector<double>{50.0, 0.0}, one, ones).loss < 1e-6);
  // clamped: a hopeless pair costs -log(1e-7) and has no gradient
  const auto clamped = pairwise_bce(std::vector<double>{-50.0, 0.0}, one, ones);
  CHECK(clamped.loss == doctest::Approx(-std::log(kProbabilityClamp)).epsilon(1e-9));
  CHECK(clamped.grad == std::vector<double>{0.0, 0.0});
  CHECK_THROWS_AS(rank_loss(q, q, std::vector<DevicePair>{{0, 0}}), InvalidSpec);
  CHECK_THROWS_AS(rank_loss(q, q, std::vector<DevicePair>{{0, 5}}), InvalidSpec);
}

TEST_CASE("rank loss depends only on Q differences") {
  Rng r(31);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 2 + r.uniform_int(10);
    std::vector<double> qp(n), qt(n), sp(n), st(n);
    const double c1 = 5 * r.normal(), c2 = 5 * r.normal();
    for (std::size_t i = 0; i < n; ++i) {
      qp[i] = r.normal();
      qt[i] = r.normal();
      sp[i] = qp[i] + c1;
      st[i] = qt[i] + c2;
    }
    Rng pr(r.next());
    const auto pairs = boundary_pairs(random_mask(r, n, 1 + r.uniform_int(n - 1)), 256, pr);
    const double a = rank_loss(qp, qt, pairs).loss, b = rank_loss(sp, st, pairs).loss;
    CHECK(std::abs(a - b) <= 1e-9 * std::max(1.0, std::abs(a)));
  }
}

TEST_CASE("rank loss gradient matches central differences") {
  Rng r(4);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t n = 3 + r.uniform_int(8);
    std::vector<double> qp(n), qt(n);
    for (std::size_t i = 0; i < n; ++i) {
      qp[i] = 2 * r.normal();
      qt[i] = 2 * r.normal();
    }
    Rng pr(r.next());
    const auto pairs = boundary_pairs(random_mask(r, n, 1 + r.uniform_int(n - 1)), 256, pr);
    const auto lg = rank_loss(qp, qt, pairs);
    const double h = 1e-5;
    for (std::size_t i = 0; i < n; ++i) {
      auto up = qp, down = qp;
      up[i] += h;
      down[i] -= h;
      const double fd = (rank_loss(up, qt, pairs).loss - rank_loss(down, qt, pairs).loss) / (2 * h);
      CHECK(testutil::fd_err(lg.grad[i], fd) < 1e-4);
    }
  }
}

TEST_CASE("joint loss gradient through the network matches central differences") {
  Rng r(8);
  for (int trial = 0; trial < 20; ++trial) {
    AgentHyperparams hp;
    hp.hidden1 = 4;
    hp.hidden2 = 3;
    hp.output_init_scale = 0.5;
    hp.rank_weight = 0.5 + r.uniform();
    FedRankAgent agent(hp, r.next());
    for (auto& w : agent.net().params()) w += 0.1 * r.normal();
    std::vector<Transition> ts;
    for (int b = 0; b < 3; ++b) ts.push_back(random_transition(r, 6, 2));
    const auto state = agent.rng().state();
    const auto lg = agent.joint_loss(ptrs(ts));
    const double h = 1e-5;
    for (std::size_t i = 0; i < agent.net().parameter_count(); ++i) {
      const double keep = agent.net().params()[i];
      agent.net().params()[i] = keep + h;
      agent.rng().set_state(state);
      const double up = agent.joint_loss(ptrs(ts)).loss;
      agent.net().params()[i] = keep - h;
      agent.rng().set_state(state);
      const double down = agent.joint_loss(ptrs(ts)).loss;
      agent.net().params()[i] = keep;
      CHECK(testutil::fd_err(lg.grad[i], (up - down) / (2 * h)) < 1e-4);
    }
  }
}

TEST_CASE("boundary pairs") {
  Rng r(1);
  const std::vector<std::uint8_t> mask{1, 0, 1, 0, 0};
  const auto all = boundary_pairs(mask, 256, r);
  CHECK(all == std::vector<DevicePair>{{0, 1}, {0, 3}, {0, 4}, {2, 1}, {2, 3}, {2, 4}});

  std::vector<std::uint8_t> big(100, 0);
  for (std::size_t i = 0; i < 30; ++i) big[i * 3] = 1;
  const auto capped = boundary_pairs(big, 256, r);
  CHECK(capped.size() == 256);
  std::set<DevicePair> distinct(capped.begin(), capped.end());
  CHECK(distinct.size() == 256);
  for (auto [i, j] : capped) {
    CHECK(big[i] == 1);
    CHECK(big[j] == 0);
  }
}

TEST_CASE("joint update with zero rank weight is a pure TD step") {
  Rng r(55);
  AgentHyperparams hp;
  hp.hidden1 = 8;
  hp.hidden2 = 8;
  hp.rank_weight = 0.0;
  hp.learning_rate = 0.01;
  hp.target_sync_period = 1000;
  FedRankAgent agent(hp, 3);
  std::vector<Transition> ts;
  for (int i = 0; i < 5; ++i) ts.push_back(random_transition(r, 10, 3));

  QNetwork ref = agent.net();
  const auto rng_before = agent.rng().state();
  const auto grad = td_loss(ptrs(ts), ref, hp.gamma).grad;
  for (std::size_t i = 0; i < grad.size(); ++i) ref.params()[i] -= hp.learning_rate * grad[i];

  agent.joint_update(ptrs(ts));
  CHECK(std::equal(ref.params().begin(), ref.params().end(), agent.net().params().begin()));
  CHECK(agent.rng().state() == rng_before);
  CHECK(agent.step() == 1);
}

TEST_CASE("joint loss falls on a frozen batch") {
  Rng r(12);
  AgentHyperparams hp;
  hp.hidden1 = 16;
  hp.hidden2 = 16;
  hp.learning_rate = 0.01;
  hp.target_sync_period = 1000000;
  FedRankAgent agent(hp, 4);
  std::vector<Transition> ts;
  for (int i = 0; i < 8; ++i) ts.push_back(random_transition(r, 12, 3));
  const auto first = agent.joint_update(ptrs(ts)).joint_loss;
  double last = first;
  for (int s = 0; s < 100; ++s) last = agent.joint_update(ptrs(ts)).joint_loss;
  CHECK(last < first);
}

TEST_CASE("target syncs every period steps") {
  Rng r(13);
  AgentHyperparams hp;
  hp.hidden1 = 4;
  hp.hidden2 = 4;
  hp.learning_rate = 0.05;
  hp.target_sync_period = 3;
  FedRankAgent agent(hp, 1);
  std::vector<Transition> ts{random_transition(r, 5, 2)};
  auto same = [&] {
    return std::equal(agent.net().params().begin(), agent.net().params().end(),
                      agent.net().target_params().begin());
  };
  agent.joint_update(ptrs(ts));
  CHECK_FALSE(same());
  agent.joint_update(ptrs(ts));
  CHECK_FALSE(same());
  agent.joint_update(ptrs(ts));
  CHECK(same());
}

TEST_CASE("exploration schedule decays linearly") {
  FedRankAgent agent(AgentHyperparams{}, 1);
  CHECK(agent.exploration(0, 50) == 0.2);
  CHECK(agent.exploration(49, 50) == doctest::Approx(0.02));
  CHECK(agent.exploration(100, 50) == doctest::Approx(0.02));
  CHECK(agent.exploration(0, 1) == 0.2);
}

TEST_CASE("agent checkpoints round-trip") {
  const auto dir = testutil::temp_dir("agent");
  Rng r(14);
  AgentHyperparams hp;
  hp.hidden1 = 6;
  hp.hidden2 = 5;
  hp.gamma = 0.7;
  FedRankAgent agent(hp, 8);
  std::vector<Transition> ts{random_transition(r, 5, 2)};
  agent.joint_update(ptrs(ts));
  agent.save(dir / "a.ckpt");
  const auto back = FedRankAgent::load(dir / "a.ckpt");
  CHECK(back.step() == 1);
  CHECK(back.hyperparams().gamma == 0.7);
  CHECK(std::equal(back.net().params().begin(), back.net().params().end(),
                   agent.net().params().begin()));
  CHECK(std::equal(back.net().target_params().begin(), back.net().target_params().end(),
                   agent.net().target_params().begin()));
  auto copy = back;
  CHECK(copy.rng().state() == agent.rng().state());
}

TEST_CASE("FedRank policy runs are reproducible and learn online") {
  auto run = [](std::uint64_t seed) {
    AgentHyperparams hp;
    hp.hidden1 = 8;
    hp.hidden2 = 8;
    hp.batch_size = 4;
    FedRankAgent agent(hp, seed);
    FedRankPolicy policy(agent, 10);
    Rng r(99);
    std::vector<std::vector<std::uint8_t>> masks;
    for (std::size_t t = 0; t < 10; ++t) {
      std::vector<CandidateObservation> obs(12);
      for (std::size_t i = 0; i < 12; ++i) {
        obs[i] = {i, r.uniform(), r.uniform(), r.uniform(), r.uniform(), r.uniform(), 5, {}};
      }
      const auto d = policy.select(obs, 3, {t, derive_seed(7, t), 5, 1.0, 2.0});
      CHECK(d.count() == 3);
      if (t > 0) CHECK(policy.last_update().has_value());
      masks.push_back(d.mask);
      policy.observe_reward(r.normal());
    }
    policy.end_episode();
    CHECK(agent.cache().size() == 10);
    CHECK(agent.cache().at(9).terminal);
    return masks;
  };
  CHECK(run(1) == run(1));
}
