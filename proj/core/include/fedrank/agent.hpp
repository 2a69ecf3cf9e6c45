#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "fedrank/policies.hpp"
#include "fedrank/rng.hpp"

namespace fedrank {

inline constexpr std::size_t kStateDims = CandidateObservation::kNumFeatures;

/// Candidate states, one row of kStateDims features per candidate.
struct StateMatrix {
  std::vector<double> values;

  std::size_t rows() const { return values.size() / kStateDims; }
  std::span<const double> row(std::size_t i) const {
    return {values.data() + i * kStateDims, kStateDims};
  }
  friend bool operator==(const StateMatrix&, const StateMatrix&) = default;
};

/// Per-feature z-score across the candidate pool (population deviation);
/// zero-variance columns map to 0.
StateMatrix normalize_states(std::span<const CandidateObservation> observations);

/// Per-device scorer: 6 -> h1 -> h2 -> 1, tanh hidden layers, linear output,
/// with a target copy.
///
/// Parameter layout: W1 (h1 x 6), b1, W2 (h2 x h1), b2, w3 (h2), b3.
class QNetwork {
 public:
  QNetwork() = default;
  /// Hidden weights uniform in +-sqrt(6 / (fan_in + fan_out)); output weights
  /// uniform in +-output_scale; biases zero. The target starts as a copy.
  QNetwork(std::size_t hidden1, std::size_t hidden2, std::uint64_t seed,
           double output_scale = 0.01);

  std::size_t hidden1() const { return h1_; }
  std::size_t hidden2() const { return h2_; }
  std::size_t parameter_count() const { return theta_.size(); }

  double forward(std::span<const double> state, bool use_target = false) const;
  std::vector<double> forward_all(const StateMatrix& states,
                                  bool use_target = false) const;
  /// grad += dq * d forward(state) / d theta.
  void accumulate_gradient(std::span<const double> state, double dq,
                           std::span<double> grad) const;

  std::span<double> params() { return theta_; }
  std::span<const double> params() const { return theta_; }
  std::span<double> target_params() { return target_; }
  std::span<const double> target_params() const { return target_; }

  void sync_target() { target_ = theta_; }

 private:
  double forward_impl(std::span<const double> w, std::span<const double> x,
                      double* a1, double* a2) const;

  std::size_t h1_ = 0;
  std::size_t h2_ = 0;
  std::vector<double> theta_;
  std::vector<double> target_;
};

/// Sum of per-device Q over selected devices.
double vdn_total(std::span<const double> per_device_q, std::span<const std::uint8_t> mask);

/// With probability 1 - explore: top-k by q, ties to the lower index.
/// Otherwise m ~ U{1..min(k, n-k)} of the top-k are swapped for m random
/// unselected devices. Exactly one uniform() is drawn before any exploration
/// draws.
SelectionDecision select_topk(std::span<const double> q_values, std::size_t k,
                              double explore, Rng& rng);

struct Transition {
  StateMatrix state;
  std::vector<std::uint8_t> action;
  double reward = 0.0;
  StateMatrix next_state;
  bool terminal = false;
};

/// Fixed-capacity FIFO replay buffer.
class ProfilerCache {
 public:
  explicit ProfilerCache(std::size_t capacity);

  void push(Transition t);
  std::size_t size() const { return items_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return items_.empty(); }
  /// i = 0 is the oldest retained transition.
  const Transition& at(std::size_t i) const { return items_.at(i); }
  /// `batch` uniform draws with replacement.
  std::vector<const Transition*> sample(std::size_t batch, Rng& rng) const;

 private:
  std::size_t capacity_;
  std::deque<Transition> items_;
};

struct LossAndGradient {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Mean over the batch of (y - y_hat)^2 where
/// y_hat = sum of theta-Q over the stored action and
/// y = r + gamma * (sum of target-Q over the target net's top-K of s'),
/// K = popcount of the stored action, y = r for terminal transitions.
/// The gradient is with respect to theta only.
LossAndGradient td_loss(std::span<const Transition* const> batch, const QNetwork& net,
                        double gamma);

/// logistic(q_i - q_j).
double pairwise_probability(double q_i, double q_j);

inline constexpr double kProbabilityClamp = 1e-7;

using DevicePair = std::pair<std::size_t, std::size_t>;

/// Mean BCE of P_ij = logistic(q_i - q_j), clamped to [1e-7, 1 - 1e-7],
/// against target probabilities. `grad` is with respect to q (length n).
LossAndGradient pairwise_bce(std::span<const double> q, std::span<const DevicePair> pairs,
                             std::span<const double> target_probs);

/// RankNet loss with soft targets logistic(q_target_i - q_target_j).
LossAndGradient rank_loss(std::span<const double> q_pred, std::span<const double> q_target,
                          std::span<const DevicePair> pairs);

/// Ordered pairs (selected, unselected). When there are more than max_pairs,
/// max_pairs of them are drawn without replacement (partial Fisher-Yates),
/// otherwise all are returned in (i, j) lexicographic order.
std::vector<DevicePair> boundary_pairs(std::span<const std::uint8_t> mask,
                                       std::size_t max_pairs, Rng& rng);

struct AgentHyperparams {
  double gamma = 0.95;
  double rank_weight = 1.0;  // weight of the rank loss in the joint loss
  double learning_rate = 1e-3;
  std::size_t target_sync_period = 10;
  double explore_start = 0.2;
  double explore_end = 0.02;
  std::size_t hidden1 = 64;
  std::size_t hidden2 = 64;
  std::size_t cache_capacity = 4096;
  std::size_t batch_size = 64;
  std::size_t max_pairs = 256;
  std::size_t updates_per_round = 1;
  double output_init_scale = 0.01;

  void validate() const;
};

struct UpdateDiagnostics {
  double td_loss = 0.0;
  double rank_loss = 0.0;
  double joint_loss = 0.0;
};

class FedRankAgent {
 public:
  FedRankAgent(const AgentHyperparams& hp, std::uint64_t seed);

  const AgentHyperparams& hyperparams() const { return hp_; }
  QNetwork& net() { return net_; }
  const QNetwork& net() const { return net_; }
  ProfilerCache& cache() { return cache_; }
  const ProfilerCache& cache() const { return cache_; }
  std::uint64_t step() const { return step_; }
  Rng& rng() { return rng_; }

  /// Gradient of mean TD loss + rank_weight * mean rank loss over the batch.
  /// Rank pairs are drawn from the agent's stream; nothing is drawn when
  /// rank_weight is 0.
  LossAndGradient joint_loss(std::span<const Transition* const> batch,
                             UpdateDiagnostics* diagnostics = nullptr);

  /// One SGD step on joint_loss; increments the step counter and copies
  /// theta into the target every target_sync_period steps.
  UpdateDiagnostics joint_update(std::span<const Transition* const> batch);

  /// updates_per_round joint updates on batches sampled from the cache.
  std::optional<UpdateDiagnostics> learn();

  /// Linear decay from explore_start to explore_end over total_rounds.
  double exploration(std::size_t round, std::size_t total_rounds) const;

  void save(const std::filesystem::path& path) const;
  static FedRankAgent load(const std::filesystem::path& path);

 private:
  AgentHyperparams hp_;
  QNetwork net_;
  ProfilerCache cache_;
  Rng rng_;
  std::uint64_t step_ = 0;
};

/// Selection policy driven by a FedRankAgent. Each select() first stores the
/// previous round's transition (its next state is the current one) and runs
/// agent.learn(), then picks devices with select_topk.
class FedRankPolicy final : public SelectionPolicy {
 public:
  FedRankPolicy(FedRankAgent& agent, std::size_t total_rounds, bool online_learning = true);

  std::string name() const override { return "fedrank"; }
  SelectionDecision select(std::span<const CandidateObservation> observations,
                           std::size_t k, const SelectionContext& ctx) override;
  void observe_reward(double reward) override;
  void end_episode() override;
  std::optional<LearningDiagnostics> last_update() const override;

 private:
  struct Pending {
    StateMatrix state;
    std::vector<std::uint8_t> action;
    double reward = 0.0;
  };

  FedRankAgent& agent_;
  std::size_t total_rounds_;
  bool online_;
  std::optional<Pending> pending_;
  std::optional<LearningDiagnostics> last_;
};

}  // namespace fedrank
