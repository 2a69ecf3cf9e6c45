#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace fedrank {

/// What a probed device reports to the server.
struct CandidateObservation {
  std::size_t client_id = 0;
  double t_comp = 0.0;  // seconds, one epoch
  double t_comm = 0.0;
  double e_comp = 0.0;  // joules, one epoch
  double e_comm = 0.0;
  double probing_loss = 0.0;
  std::size_t data_size = 1;
  std::vector<double> batch_losses;  // probing epoch, used by the Oort utility

  static constexpr std::size_t kNumFeatures = 6;
  /// (t_comp, t_comm, e_comp, e_comm, probing_loss, data_size)
  std::array<double, kNumFeatures> features() const;
};

/// Mask and ordering index into the candidate list, not the device pool.
struct SelectionDecision {
  std::vector<std::uint8_t> mask;
  /// Full permutation of candidate positions; the selected occupy the front.
  std::vector<std::size_t> order;

  std::size_t count() const;
  std::vector<std::size_t> selected() const;
};

struct SelectionContext {
  std::size_t round = 0;
  std::uint64_t seed = 0;  // per-round policy seed
  std::size_t local_epochs = 1;
  double latency_budget = 1.0;
  double alpha = 2.0;
};

/// t_comm + t_comp * (l_ep - 1).
double projected_round_time(const CandidateObservation& obs, std::size_t local_epochs);

/// Throws InvalidSpec unless 1 <= k <= n.
void check_selection_size(std::size_t k, std::size_t n);

/// Top-k by score (descending unless `ascending`), ties to the lower client_id.
SelectionDecision top_k_decision(std::span<const double> scores,
                                 std::span<const CandidateObservation> obs,
                                 std::size_t k, bool ascending = false);

struct LearningDiagnostics {
  double td_loss = 0.0;
  double rank_loss = 0.0;
};

class SelectionPolicy {
 public:
  virtual ~SelectionPolicy() = default;
  virtual std::string name() const = 0;
  virtual SelectionDecision select(std::span<const CandidateObservation> observations,
                                   std::size_t k, const SelectionContext& ctx) = 0;

  // Hooks for learning policies; analytical policies ignore them.
  virtual void observe_reward(double /*reward*/) {}
  virtual void end_episode() {}
  /// Losses of the update performed during the most recent select(), if any.
  virtual std::optional<LearningDiagnostics> last_update() const { return std::nullopt; }
};

SelectionDecision random_selection(std::size_t n, std::size_t k, std::uint64_t seed);

class RandomPolicy final : public SelectionPolicy {
 public:
  std::string name() const override { return "random"; }
  SelectionDecision select(std::span<const CandidateObservation> observations,
                           std::size_t k, const SelectionContext& ctx) override;
};

/// |B_i| * sqrt(mean of squared batch losses) * (T/t_i)^(alpha * [T < t_i]).
double oort_utility(const CandidateObservation& obs, double latency_budget,
                    double alpha, std::size_t local_epochs);

class OortPolicy final : public SelectionPolicy {
 public:
  std::string name() const override { return "oort"; }
  SelectionDecision select(std::span<const CandidateObservation> observations,
                           std::size_t k, const SelectionContext& ctx) override;
};

/// Sorts candidates by projected round time into `num_tiers` equal quantile
/// tiers, visits tiers round-robin across calls and takes the k lowest-loss
/// devices of the current tier. A short tier is topped up from neighbours in
/// the order +1, -1, +2, -2, ...
class LatencyTierPolicy final : public SelectionPolicy {
 public:
  explicit LatencyTierPolicy(std::size_t num_tiers);
  std::string name() const override { return "tier"; }
  SelectionDecision select(std::span<const CandidateObservation> observations,
                           std::size_t k, const SelectionContext& ctx) override;

 private:
  std::size_t num_tiers_;
  std::size_t calls_ = 0;
};

class GreedyLossPolicy final : public SelectionPolicy {
 public:
  std::string name() const override { return "greedy_loss"; }
  SelectionDecision select(std::span<const CandidateObservation> observations,
                           std::size_t k, const SelectionContext& ctx) override;
};

class GreedyLatencyPolicy final : public SelectionPolicy {
 public:
  std::string name() const override { return "greedy_latency"; }
  SelectionDecision select(std::span<const CandidateObservation> observations,
                           std::size_t k, const SelectionContext& ctx) override;
};

/// Analytical policies by name: random, oort, tier, greedy_loss, greedy_latency.
std::unique_ptr<SelectionPolicy> make_analytical_policy(const std::string& name,
                                                        std::size_t num_tiers = 3);

}  // namespace fedrank
