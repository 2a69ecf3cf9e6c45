#include "fedrank/agent.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fedrank/errors.hpp"
#include "flat_file.hpp"

namespace fedrank {

StateMatrix normalize_states(std::span<const CandidateObservation> observations) {
  const std::size_t n = observations.size();
  StateMatrix out;
  out.values.resize(n * kStateDims);
  if (n == 0) return out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto f = observations[i].features();
    std::copy(f.begin(), f.end(), out.values.begin() + static_cast<std::ptrdiff_t>(i * kStateDims));
  }
  for (std::size_t k = 0; k < kStateDims; ++k) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += out.values[i * kStateDims + k];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = out.values[i * kStateDims + k] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double sd = std::sqrt(var);
    for (std::size_t i = 0; i < n; ++i) {
      auto& v = out.values[i * kStateDims + k];
      v = sd > 0.0 ? (v - mean) / sd : 0.0;
    }
  }
  return out;
}

QNetwork::QNetwork(std::size_t hidden1, std::size_t hidden2, std::uint64_t seed,
                   double output_scale)
    : h1_(hidden1), h2_(hidden2) {
  if (hidden1 == 0 || hidden2 == 0) throw InvalidSpec("Q-network layers must be non-empty");
  theta_.assign(h1_ * kStateDims + h1_ + h2_ * h1_ + h2_ + h2_ + 1, 0.0);
  Rng rng(seed);
  auto fill = [&](std::size_t offset, std::size_t count, double limit) {
    for (std::size_t i = 0; i < count; ++i) {
      theta_[offset + i] = limit * (2.0 * rng.uniform() - 1.0);
    }
  };
  const std::size_t w2_at = h1_ * kStateDims + h1_;
  const std::size_t w3_at = w2_at + h2_ * h1_ + h2_;
  fill(0, h1_ * kStateDims, std::sqrt(6.0 / static_cast<double>(kStateDims + h1_)));
  fill(w2_at, h2_ * h1_, std::sqrt(6.0 / static_cast<double>(h1_ + h2_)));
  fill(w3_at, h2_, output_scale);
  target_ = theta_;
}

double QNetwork::forward_impl(std::span<const double> w, std::span<const double> x,
                              double* a1, double* a2) const {
  const double* w1 = w.data();
  const double* b1 = w1 + h1_ * kStateDims;
  const double* w2 = b1 + h1_;
  const double* b2 = w2 + h2_ * h1_;
  const double* w3 = b2 + h2_;
  const double b3 = w3[h2_];
  for (std::size_t j = 0; j < h1_; ++j) {
    double s = b1[j];
    const double* row = w1 + j * kStateDims;
    for (std::size_t k = 0; k < kStateDims; ++k) s += row[k] * x[k];
    a1[j] = std::tanh(s);
  }
  double out = b3;
  for (std::size_t m = 0; m < h2_; ++m) {
    double s = b2[m];
    const double* row = w2 + m * h1_;
    for (std::size_t j = 0; j < h1_; ++j) s += row[j] * a1[j];
    a2[m] = std::tanh(s);
    out += w3[m] * a2[m];
  }
  return out;
}

double QNetwork::forward(std::span<const double> state, bool use_target) const {
  std::vector<double> a1(h1_), a2(h2_);
  return forward_impl(use_target ? target_ : theta_, state, a1.data(), a2.data());
}

std::vector<double> QNetwork::forward_all(const StateMatrix& states, bool use_target) const {
  std::vector<double> a1(h1_), a2(h2_);
  std::vector<double> out(states.rows());
  const auto& w = use_target ? target_ : theta_;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = forward_impl(w, states.row(i), a1.data(), a2.data());
  }
  return out;
}

void QNetwork::accumulate_gradient(std::span<const double> state, double dq,
                                   std::span<double> grad) const {
  std::vector<double> a1(h1_), a2(h2_), d1(h1_, 0.0);
  forward_impl(theta_, state, a1.data(), a2.data());

  const std::size_t b1_at = h1_ * kStateDims;
  const std::size_t w2_at = b1_at + h1_;
  const std::size_t b2_at = w2_at + h2_ * h1_;
  const std::size_t w3_at = b2_at + h2_;
  const double* w2 = theta_.data() + w2_at;
  const double* w3 = theta_.data() + w3_at;

  grad[w3_at + h2_] += dq;
  for (std::size_t m = 0; m < h2_; ++m) {
    grad[w3_at + m] += dq * a2[m];
    const double d2 = dq * w3[m] * (1.0 - a2[m] * a2[m]);
    if (d2 == 0.0) continue;
    grad[b2_at + m] += d2;
    double* g = grad.data() + w2_at + m * h1_;
    const double* row = w2 + m * h1_;
    for (std::size_t j = 0; j < h1_; ++j) {
      g[j] += d2 * a1[j];
      d1[j] += d2 * row[j];
    }
  }
  for (std::size_t j = 0; j < h1_; ++j) {
    const double d = d1[j] * (1.0 - a1[j] * a1[j]);
    grad[b1_at + j] += d;
    double* g = grad.data() + j * kStateDims;
    for (std::size_t k = 0; k < kStateDims; ++k) g[k] += d * state[k];
  }
}

double vdn_total(std::span<const double> per_device_q, std::span<const std::uint8_t> mask) {
  if (per_device_q.size() != mask.size()) throw InvalidAction("Q and mask lengths differ");
  double total = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) total += per_device_q[i];
  }
  return total;
}

SelectionDecision select_topk(std::span<const double> q_values, std::size_t k,
                              double explore, Rng& rng) {
  auto decision = top_k_decision(q_values, {}, k);
  const std::size_t n = q_values.size();
  const double u = rng.uniform();
  if (u >= explore || k == n) return decision;

  auto& order = decision.order;
  const std::size_t swaps = 1 + static_cast<std::size_t>(rng.uniform_int(std::min(k, n - k)));
  // Partial Fisher-Yates on each side picks distinct positions.
  for (std::size_t s = 0; s < swaps; ++s) {
    const std::size_t a = s + static_cast<std::size_t>(rng.uniform_int(k - s));
    std::swap(order[s], order[a]);
    const std::size_t b = k + s + static_cast<std::size_t>(rng.uniform_int(n - k - s));
    std::swap(order[k + s], order[b]);
  }
  for (std::size_t s = 0; s < swaps; ++s) std::swap(order[s], order[k + s]);
  decision.mask.assign(n, 0);
  for (std::size_t r = 0; r < k; ++r) decision.mask[order[r]] = 1;
  return decision;
}

ProfilerCache::ProfilerCache(std::size_t capacity) : capacity_(capacity) {
  if (capacity == 0) throw InvalidSpec("cache capacity must be positive");
}

void ProfilerCache::push(Transition t) {
  if (!std::isfinite(t.reward)) throw NumericError("non-finite reward in transition");
  if (items_.size() == capacity_) items_.pop_front();
  items_.push_back(std::move(t));
}

std::vector<const Transition*> ProfilerCache::sample(std::size_t batch, Rng& rng) const {
  std::vector<const Transition*> out;
  if (items_.empty()) return out;
  out.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    out.push_back(&items_[static_cast<std::size_t>(rng.uniform_int(items_.size()))]);
  }
  return out;
}

namespace {

double next_state_value(const Transition& t, const QNetwork& net) {
  if (t.terminal) return 0.0;
  auto q = net.forward_all(t.next_state, /*use_target=*/true);
  const auto k = std::min<std::size_t>(
      static_cast<std::size_t>(std::count(t.action.begin(), t.action.end(), 1)), q.size());
  std::partial_sort(q.begin(), q.begin() + static_cast<std::ptrdiff_t>(k), q.end(),
                    std::greater<>());
  return std::accumulate(q.begin(), q.begin() + static_cast<std::ptrdiff_t>(k), 0.0);
}

}  // namespace

LossAndGradient td_loss(std::span<const Transition* const> batch, const QNetwork& net,
                        double gamma) {
  if (batch.empty()) throw InvalidSpec("TD loss needs a non-empty batch");
  LossAndGradient out{0.0, std::vector<double>(net.parameter_count(), 0.0)};
  const double scale = 1.0 / static_cast<double>(batch.size());
  for (const Transition* t : batch) {
    double predicted = 0.0;
    for (std::size_t i = 0; i < t->action.size(); ++i) {
      if (t->action[i]) predicted += net.forward(t->state.row(i));
    }
    const double target = t->reward + gamma * next_state_value(*t, net);
    const double err = target - predicted;
    out.loss += err * err * scale;
    const double dq = -2.0 * err * scale;
    for (std::size_t i = 0; i < t->action.size(); ++i) {
      if (t->action[i]) net.accumulate_gradient(t->state.row(i), dq, out.grad);
    }
  }
  if (!std::isfinite(out.loss)) throw NumericError("non-finite TD loss");
  return out;
}

double pairwise_probability(double q_i, double q_j) {
  const double d = q_i - q_j;
  if (d >= 0.0) return 1.0 / (1.0 + std::exp(-d));
  const double e = std::exp(d);
  return e / (1.0 + e);
}

LossAndGradient pairwise_bce(std::span<const double> q, std::span<const DevicePair> pairs,
                             std::span<const double> target_probs) {
  if (pairs.size() != target_probs.size()) {
    throw InvalidSpec("one target probability per pair is required");
  }
  LossAndGradient out{0.0, std::vector<double>(q.size(), 0.0)};
  if (pairs.empty()) return out;
  const double scale = 1.0 / static_cast<double>(pairs.size());
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    const auto [i, j] = pairs[p];
    if (i >= q.size() || j >= q.size() || i == j) {
      throw InvalidSpec("pair (" + std::to_string(i) + ", " + std::to_string(j) +
                        ") is not a pair of distinct candidates");
    }
    const double raw = pairwise_probability(q[i], q[j]);
    const double prob = std::clamp(raw, kProbabilityClamp, 1.0 - kProbabilityClamp);
    const double target = target_probs[p];
    out.loss -= scale * (target * std::log(prob) + (1.0 - target) * std::log(1.0 - prob));
    // d/d(q_i - q_j) of the unclamped BCE is P - target; zero while clamped.
    if (prob == raw) {
      const double g = scale * (raw - target);
      out.grad[i] += g;
      out.grad[j] -= g;
    }
  }
  return out;
}

LossAndGradient rank_loss(std::span<const double> q_pred, std::span<const double> q_target,
                          std::span<const DevicePair> pairs) {
  if (q_pred.size() != q_target.size()) {
    throw InvalidSpec("predicted and target Q vectors differ in length");
  }
  std::vector<double> targets;
  targets.reserve(pairs.size());
  for (const auto& [i, j] : pairs) {
    if (i >= q_target.size() || j >= q_target.size()) {
      throw InvalidSpec("pair index outside the candidate pool");
    }
    targets.push_back(pairwise_probability(q_target[i], q_target[j]));
  }
  return pairwise_bce(q_pred, pairs, targets);
}

std::vector<DevicePair> boundary_pairs(std::span<const std::uint8_t> mask,
                                       std::size_t max_pairs, Rng& rng) {
  std::vector<std::size_t> chosen, rest;
  for (std::size_t i = 0; i < mask.size(); ++i) (mask[i] ? chosen : rest).push_back(i);
  const std::size_t total = chosen.size() * rest.size();
  std::vector<DevicePair> pairs;
  if (total <= max_pairs) {
    pairs.reserve(total);
    for (auto i : chosen) {
      for (auto j : rest) pairs.emplace_back(i, j);
    }
    return pairs;
  }
  std::vector<std::size_t> ids(total);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  pairs.reserve(max_pairs);
  for (std::size_t s = 0; s < max_pairs; ++s) {
    const std::size_t pick = s + static_cast<std::size_t>(rng.uniform_int(total - s));
    std::swap(ids[s], ids[pick]);
    pairs.emplace_back(chosen[ids[s] / rest.size()], rest[ids[s] % rest.size()]);
  }
  return pairs;
}

void AgentHyperparams::validate() const {
  if (!(gamma >= 0.0 && gamma < 1.0)) throw InvalidSpec("gamma must lie in [0, 1)");
  if (!(rank_weight >= 0.0)) throw InvalidSpec("rank weight must be non-negative");
  if (!(learning_rate >= 0.0)) throw InvalidSpec("agent learning rate must be >= 0");
  if (target_sync_period == 0) throw InvalidSpec("target sync period must be >= 1");
  if (!(explore_start >= 0.0 && explore_start <= 1.0 && explore_end >= 0.0 &&
        explore_end <= 1.0)) {
    throw InvalidSpec("exploration rates must lie in [0, 1]");
  }
  if (hidden1 == 0 || hidden2 == 0) throw InvalidSpec("hidden sizes must be positive");
  if (cache_capacity == 0 || batch_size == 0) {
    throw InvalidSpec("cache capacity and batch size must be positive");
  }
}

FedRankAgent::FedRankAgent(const AgentHyperparams& hp, std::uint64_t seed)
    : hp_(hp),
      net_((hp.validate(), hp.hidden1), hp.hidden2, derive_seed(seed, "init"),
           hp.output_init_scale),
      cache_(hp.cache_capacity),
      rng_(derive_seed(seed, "updates")) {}

LossAndGradient FedRankAgent::joint_loss(std::span<const Transition* const> batch,
                                         UpdateDiagnostics* diagnostics) {
  auto out = td_loss(batch, net_, hp_.gamma);
  double rank_mean = 0.0;
  if (hp_.rank_weight != 0.0) {
    const double scale = hp_.rank_weight / static_cast<double>(batch.size());
    for (const Transition* t : batch) {
      const auto q_pred = net_.forward_all(t->state);
      const auto q_target = net_.forward_all(t->state, /*use_target=*/true);
      const auto pairs = boundary_pairs(t->action, hp_.max_pairs, rng_);
      const auto rank = rank_loss(q_pred, q_target, pairs);
      rank_mean += rank.loss / static_cast<double>(batch.size());
      for (std::size_t i = 0; i < rank.grad.size(); ++i) {
        if (rank.grad[i] != 0.0) {
          net_.accumulate_gradient(t->state.row(i), scale * rank.grad[i], out.grad);
        }
      }
    }
  }
  if (diagnostics != nullptr) {
    diagnostics->td_loss = out.loss;
    diagnostics->rank_loss = rank_mean;
    diagnostics->joint_loss = out.loss + hp_.rank_weight * rank_mean;
  }
  out.loss += hp_.rank_weight * rank_mean;
  return out;
}

UpdateDiagnostics FedRankAgent::joint_update(std::span<const Transition* const> batch) {
  UpdateDiagnostics diag;
  const auto lg = joint_loss(batch, &diag);
  auto theta = net_.params();
  for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= hp_.learning_rate * lg.grad[i];
  ++step_;
  if (step_ % hp_.target_sync_period == 0) net_.sync_target();
  return diag;
}

std::optional<UpdateDiagnostics> FedRankAgent::learn() {
  if (cache_.empty()) return std::nullopt;
  UpdateDiagnostics last;
  for (std::size_t u = 0; u < hp_.updates_per_round; ++u) {
    const auto batch = cache_.sample(hp_.batch_size, rng_);
    last = joint_update(batch);
  }
  return last;
}

double FedRankAgent::exploration(std::size_t round, std::size_t total_rounds) const {
  if (total_rounds <= 1) return hp_.explore_start;
  const double frac = std::min(1.0, static_cast<double>(round) /
                                        static_cast<double>(total_rounds - 1));
  return hp_.explore_start + (hp_.explore_end - hp_.explore_start) * frac;
}

void FedRankAgent::save(const std::filesystem::path& path) const {
  nlohmann::json rng_state = nlohmann::json::array();
  for (auto s : rng_.state()) rng_state.push_back(std::to_string(s));
  nlohmann::json header = {
      {"content", "agent"},
      {"step", step_},
      {"rng", {{"name", kRngName}, {"version", kRngVersion}, {"state", rng_state}}},
      {"hyperparams",
       {{"gamma", hp_.gamma},
        {"rank_weight", hp_.rank_weight},
        {"learning_rate", hp_.learning_rate},
        {"target_sync_period", hp_.target_sync_period},
        {"explore_start", hp_.explore_start},
        {"explore_end", hp_.explore_end},
        {"hidden1", hp_.hidden1},
        {"hidden2", hp_.hidden2},
        {"cache_capacity", hp_.cache_capacity},
        {"batch_size", hp_.batch_size},
        {"max_pairs", hp_.max_pairs},
        {"updates_per_round", hp_.updates_per_round},
        {"output_init_scale", hp_.output_init_scale}}}};
  detail::write_flat_file(path, std::move(header),
                          {{"theta", net_.params()}, {"target", net_.target_params()}});
}

FedRankAgent FedRankAgent::load(const std::filesystem::path& path) {
  const auto file = detail::read_flat_file(path);
  const auto& h = file.header;
  if (h.value("content", "") != "agent") {
    throw ParseError(path.string() + ": not an agent checkpoint");
  }
  const auto& j = h.at("hyperparams");
  AgentHyperparams hp;
  hp.gamma = j.at("gamma");
  hp.rank_weight = j.at("rank_weight");
  hp.learning_rate = j.at("learning_rate");
  hp.target_sync_period = j.at("target_sync_period");
  hp.explore_start = j.at("explore_start");
  hp.explore_end = j.at("explore_end");
  hp.hidden1 = j.at("hidden1");
  hp.hidden2 = j.at("hidden2");
  hp.cache_capacity = j.at("cache_capacity");
  hp.batch_size = j.at("batch_size");
  hp.max_pairs = j.at("max_pairs");
  hp.updates_per_round = j.at("updates_per_round");
  hp.output_init_scale = j.at("output_init_scale");

  FedRankAgent agent(hp, 0);
  const auto theta = file.section("theta");
  const auto target = file.section("target");
  if (theta.size() != agent.net_.parameter_count() ||
      target.size() != agent.net_.parameter_count()) {
    throw ParseError(path.string() + ": parameter count does not match layer sizes");
  }
  std::copy(theta.begin(), theta.end(), agent.net_.params().begin());
  std::copy(target.begin(), target.end(), agent.net_.target_params().begin());
  agent.step_ = h.at("step").get<std::uint64_t>();
  Rng::State state{};
  const auto& words = h.at("rng").at("state");
  for (std::size_t i = 0; i < state.size(); ++i) {
    state[i] = std::stoull(words.at(i).get<std::string>());
  }
  agent.rng_.set_state(state);
  return agent;
}

FedRankPolicy::FedRankPolicy(FedRankAgent& agent, std::size_t total_rounds,
                             bool online_learning)
    : agent_(agent), total_rounds_(total_rounds), online_(online_learning) {}

SelectionDecision FedRankPolicy::select(std::span<const CandidateObservation> observations,
                                        std::size_t k, const SelectionContext& ctx) {
  check_selection_size(k, observations.size());
  auto states = normalize_states(observations);
  last_.reset();
  if (pending_ && online_) {
    agent_.cache().push({std::move(pending_->state), std::move(pending_->action),
                         pending_->reward, states, false});
    if (auto diag = agent_.learn()) last_ = LearningDiagnostics{diag->td_loss, diag->rank_loss};
  }
  const auto q = agent_.net().forward_all(states);
  Rng explore_rng(derive_seed(ctx.seed, "explore"));
  auto decision = select_topk(q, k, agent_.exploration(ctx.round, total_rounds_), explore_rng);
  pending_ = Pending{std::move(states), decision.mask, 0.0};
  return decision;
}

void FedRankPolicy::observe_reward(double reward) {
  if (pending_) pending_->reward = reward;
}

void FedRankPolicy::end_episode() {
  if (pending_ && online_) {
    auto state = pending_->state;
    agent_.cache().push({std::move(pending_->state), std::move(pending_->action),
                         pending_->reward, std::move(state), true});
    if (auto diag = agent_.learn()) last_ = LearningDiagnostics{diag->td_loss, diag->rank_loss};
  }
  pending_.reset();
}

std::optional<LearningDiagnostics> FedRankPolicy::last_update() const { return last_; }

}  // namespace fedrank
