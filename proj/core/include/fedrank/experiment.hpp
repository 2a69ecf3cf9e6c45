#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedrank/agent.hpp"
#include "fedrank/data.hpp"
#include "fedrank/policies.hpp"
#include "fedrank/reward.hpp"
#include "fedrank/system_model.hpp"
#include "fedrank/trainer.hpp"

namespace fedrank {

inline constexpr int kConfigSchemaVersion = 1;

enum class CloningLoss { kPairwise, kPointwise };

struct ImitationSettings {
  bool enabled = false;
  std::vector<std::string> experts{"oort"};
  std::size_t rounds = 50;  // demonstration rounds per expert
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double learning_rate = 0.01;
  CloningLoss loss = CloningLoss::kPairwise;
  /// Load a pretrained agent instead of collecting and pretraining.
  std::optional<std::filesystem::path> checkpoint;
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::size_t pool_size = 100;
  std::size_t clients_per_round = 10;
  std::size_t rounds = 50;
  double target_accuracy = 0.99;

  DatasetSource dataset = SyntheticSpec{};
  std::optional<DatasetSource> test_dataset;
  /// Held-out share of file datasets without an explicit test set.
  double test_fraction = 0.2;
  /// Explicit dataset seed; otherwise derived from the "data" stream.
  bool dataset_seed_given = false;

  PartitionRegime regime = PartitionRegime::kDirichlet;
  double sigma = 0.1;

  ModelKind model = ModelKind::kSoftmaxRegression;
  std::size_t hidden = 32;
  TrainConfig training;

  HeterogeneitySpec system;
  std::optional<std::filesystem::path> trace;
  RewardParams reward;

  std::string policy = "random";
  std::size_t num_tiers = 3;
  AgentHyperparams agent;
  bool online_learning = true;
  ImitationSettings imitation;

  bool early_exit = true;
  double probe_fraction = 1.0;
  std::size_t threads = 1;

  std::filesystem::path output_dir;
  std::optional<std::filesystem::path> baseline_summary;

  void validate() const;
};

ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Named sub-seeds of the master seed; changing the policy never touches
/// the data or system streams.
struct SeedStreams {
  std::uint64_t data;
  std::uint64_t system;
  std::uint64_t training;
  std::uint64_t policy;
  std::uint64_t agent;
  std::uint64_t imitation;

  static SeedStreams from_master(std::uint64_t master);
};

struct RoundRecord {
  std::size_t t = 0;  // 1-based
  std::vector<std::size_t> selected;  // client ids
  double accuracy = 0.0;
  double delta_acc = 0.0;
  double r_t = 0.0;
  double r_e = 0.0;
  double reward = 0.0;
  double cum_time = 0.0;
  double cum_energy = 0.0;
  double divergence = 0.0;
  std::optional<double> td_loss;
  std::optional<double> rank_loss;

  // Both accountings, whichever mode fed r_t/r_e.
  double probing_r_t = 0.0;
  double probing_r_e = 0.0;
  double vanilla_r_t = 0.0;
  double vanilla_r_e = 0.0;
  std::size_t rejected = 0;
  std::vector<std::size_t> dropped;  // clients lost to numeric failure
};

/// Passed to the round observer after selection.
struct RoundObservation {
  std::size_t t = 0;
  std::span<const CandidateObservation> candidates;
  const SelectionDecision* decision = nullptr;
};

/// One federated run: data, shards, device pool and the global model.
class Simulation {
 public:
  explicit Simulation(const ExperimentConfig& config);

  const ExperimentConfig& config() const { return config_; }
  const SeedStreams& seeds() const { return seeds_; }
  const Dataset& train_set() const { return train_; }
  const Dataset& test_set() const { return test_; }
  const std::vector<ClientShard>& shards() const { return shards_; }
  const std::vector<DeviceProfile>& profiles() const { return profiles_; }
  const ModelParams& global_model() const { return global_; }
  double accuracy() const { return accuracy_; }
  std::size_t rounds_done() const { return round_; }

  void set_observer(std::function<void(const RoundObservation&)> observer) {
    observer_ = std::move(observer);
  }

  /// Probe, select, finish local training on the selected, aggregate,
  /// evaluate, account costs, reward.
  RoundRecord run_round(SelectionPolicy& policy);

 private:
  ExperimentConfig config_;
  SeedStreams seeds_;
  Dataset train_;
  Dataset test_;
  std::vector<ClientShard> shards_;
  std::vector<DeviceProfile> profiles_;
  std::optional<RuntimeTrace> trace_;
  ModelParams global_;
  double accuracy_ = 0.0;
  std::size_t round_ = 0;
  double cum_time_ = 0.0;
  double cum_energy_ = 0.0;
  std::function<void(const RoundObservation&)> observer_;
};

struct Summary {
  std::string policy;
  std::uint64_t seed = 0;
  std::size_t rounds = 0;
  double final_accuracy = 0.0;
  double best_accuracy = 0.0;
  double target_accuracy = 0.0;
  std::optional<std::size_t> rounds_to_target;
  std::optional<double> time_to_target;
  std::optional<double> energy_to_target;
  double total_time = 0.0;
  double total_energy = 0.0;
  double mean_reward = 0.0;
  std::vector<double> accuracy_curve;
  std::vector<double> time_curve;    // cumulative
  std::vector<double> energy_curve;  // cumulative
};

/// First round whose accuracy reaches `target`, with cumulative time/energy.
struct TargetHit {
  std::size_t round;
  double time;
  double energy;
};
std::optional<TargetHit> first_hit(const Summary& s, double target);

Summary summarize(const ExperimentConfig& config, std::span<const RoundRecord> records);

struct ExperimentResult {
  std::vector<RoundRecord> records;
  Summary summary;
  std::vector<double> pretrain_curve;
};

/// Builds the policy (pretraining FedRank first when configured), runs every
/// round and writes rounds.csv and summary.json when output_dir is set.
ExperimentResult run_experiment(const ExperimentConfig& config);

/// Builds the configured policy. For fedrank, `agent` must be supplied.
std::unique_ptr<SelectionPolicy> make_policy(const ExperimentConfig& config,
                                             FedRankAgent* agent);

/// FedRank agent for a config: loaded from the imitation checkpoint, or
/// pretrained on fresh demonstrations, or untrained.
FedRankAgent prepare_agent(const ExperimentConfig& config,
                           std::vector<double>* pretrain_curve = nullptr);

inline constexpr const char* kRoundsCsvHeader =
    "t,selected,acc,delta_acc,r_t,r_e,reward,cum_time,cum_energy,divergence,td_loss,rank_loss";

void write_rounds_csv(std::ostream& out, std::span<const RoundRecord> records);
std::string summary_to_json(const Summary& s);
Summary summary_from_json(const std::string& text);
Summary load_summary(const std::filesystem::path& path);

struct ComparisonRow {
  std::string name;
  double final_accuracy = 0.0;
  std::optional<std::size_t> rounds_to_target;
  /// Cumulative energy to the target as % of the baseline's.
  std::optional<double> energy_percent;
  /// Baseline rounds-to-target / candidate rounds-to-target.
  std::optional<double> speed_rounds;
  /// Same ratio on simulated wall-clock time.
  std::optional<double> speed_time;
  bool reached = false;
};

/// The first summary is the baseline. The target defaults to the baseline's
/// target_accuracy.
std::vector<ComparisonRow> compare_runs(std::span<const Summary> summaries,
                                        std::optional<double> target = std::nullopt);
std::string comparison_to_json(std::span<const ComparisonRow> rows, double target);
std::string format_comparison(std::span<const ComparisonRow> rows, double target);

}  // namespace fedrank
