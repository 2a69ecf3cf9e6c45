#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fedrank/agent.hpp"
#include "fedrank/experiment.hpp"

namespace fedrank {

/// One expert decision on one round's candidate pool.
struct Demonstration {
  StateMatrix states;                 // normalized
  std::vector<std::uint8_t> mask;     // expert selection
  std::vector<std::size_t> order;     // expert ranking, selected first

  std::size_t k() const;
  /// Throws InvalidSpec unless the ordering is a permutation with the
  /// selected devices in its first k() slots.
  void validate() const;
  friend bool operator==(const Demonstration&, const Demonstration&) = default;
};

/// Runs `rounds` federated rounds driven by each expert in turn, all on the
/// environment built from `env` with master seed `seed`, and records every
/// decision. Experts come in the given order.
std::vector<Demonstration> collect_demonstrations(std::span<const std::string> experts,
                                                  const ExperimentConfig& env,
                                                  std::size_t rounds, std::uint64_t seed);

struct PretrainSettings {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double learning_rate = 0.01;
  std::uint64_t seed = 0;
  CloningLoss loss = CloningLoss::kPairwise;
};

/// Cloning loss of one demonstration.
/// Pairwise: mean BCE of logistic(q_i - q_j) against 1 over every
/// (expert-selected i, unselected j). Pointwise: mean BCE of logistic(q_i)
/// against the expert mask.
LossAndGradient cloning_loss(const QNetwork& net, const Demonstration& demo,
                             CloningLoss kind);

/// Mean cloning loss over a demonstration set.
double mean_cloning_loss(const QNetwork& net, std::span<const Demonstration> demos,
                         CloningLoss kind);

/// SGD over reshuffled mini-batches of demonstrations (Rng(derive(seed, epoch))).
/// Returns one entry per epoch: the mean pre-update batch loss. Copies theta
/// into the target at the end.
std::vector<double> pretrain(QNetwork& net, std::span<const Demonstration> demos,
                             const PretrainSettings& settings);

/// Demonstrations for a run config: every configured expert on a partition and
/// device pool drawn from the imitation seed stream, sharing the run's dataset.
std::vector<Demonstration> collect_for_config(const ExperimentConfig& config);

/// Pretrains `agent`'s network with the config's imitation settings.
std::vector<double> pretrain_agent(FedRankAgent& agent, const ExperimentConfig& config,
                                   std::span<const Demonstration> demos);

/// |a and a*| / k.
double topk_agreement(std::span<const std::uint8_t> mask,
                      std::span<const std::uint8_t> expert_mask, std::size_t k);

/// Mean top-k agreement of the greedy (no exploration) network choice with
/// the expert over `demos`.
double mean_agreement(const QNetwork& net, std::span<const Demonstration> demos);

// Demonstration file, little-endian:
//   "FRDM", u32 version (1), u64 count, then per entry
//   u32 rows, rows*6 f64 states, rows u8 mask, rows u32 order.
void save_demonstrations(const std::filesystem::path& path,
                         std::span<const Demonstration> demos);
std::vector<Demonstration> load_demonstrations(const std::filesystem::path& path);

}  // namespace fedrank
