#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "fedrank/data.hpp"

namespace fedrank {

enum class ModelKind { kSoftmaxRegression, kMlp1 };

std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& name);

/// Flat parameter vector.
///
/// softmax_regression, shape {d, C}: W (C x d, row-major), then b (C).
/// mlp1, shape {d, h, C}: W1 (h x d), b1 (h), W2 (C x h), b2 (C); tanh hidden.
struct ModelParams {
  ModelKind kind = ModelKind::kSoftmaxRegression;
  std::vector<std::size_t> shape;
  std::vector<double> weights;

  std::size_t input_dims() const { return shape.front(); }
  std::size_t num_classes() const { return shape.back(); }
  bool same_shape(const ModelParams& other) const {
    return kind == other.kind && shape == other.shape;
  }
  /// Throws InvalidSpec on a length mismatch or non-finite entry.
  void validate() const;

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

std::size_t parameter_count(ModelKind kind, std::span<const std::size_t> shape);

/// Softmax regression starts at zero. The MLP draws hidden weights uniformly
/// in +-sqrt(6 / (fan_in + fan_out)) from `seed` and starts the output layer
/// at zero.
ModelParams init_params(ModelKind kind, std::size_t dims, std::size_t classes,
                        std::size_t hidden, std::uint64_t seed);

/// Class probabilities for one example (softmax, max-shifted).
std::vector<double> predict_proba(const ModelParams& params,
                                  std::span<const double> x);

/// Mean cross-entropy over `rows`; when `grad` is non-empty it receives the
/// gradient of that mean (overwritten, same length as params.weights).
double batch_loss(const ModelParams& params, const Dataset& data,
                  std::span<const std::size_t> rows, std::span<double> grad);

struct TrainConfig {
  double learning_rate = 0.05;
  std::size_t batch_size = 32;
  std::size_t local_epochs = 5;
  /// Client seed for this round; see client_seed().
  std::uint64_t seed = 0;

  void validate() const;
};

/// seed = derive(derive(derive(run_seed, "client"), client_id), round).
std::uint64_t client_seed(std::uint64_t run_seed, std::size_t client_id,
                          std::size_t round);

struct EpochResult {
  std::vector<double> batch_losses;  // pre-update loss of each batch
  double mean_loss() const;
};

/// One epoch of mini-batch SGD. Rows are shuffled with
/// Rng(derive(cfg.seed, epoch)); batches are consecutive slices of that order,
/// the last possibly short.
EpochResult train_epoch(ModelParams& params, const Dataset& data,
                        std::span<const std::size_t> rows,
                        const TrainConfig& cfg, std::size_t epoch);

struct ProbeResult {
  ModelParams params;
  double probing_loss = 0.0;
  std::vector<double> batch_losses;
};

/// Epoch 0 of local training. probing_loss is the mean pre-update batch loss.
ProbeResult probe_epoch(const ModelParams& params, const Dataset& data,
                        const ClientShard& shard, const TrainConfig& cfg);

struct LocalTrainingResult {
  ModelParams params;
  std::size_t epochs_run = 0;
  std::size_t batches_run = 0;
};

/// Epochs 1 .. local_epochs-1, continuing from the probe output.
LocalTrainingResult finish_local_training(const ModelParams& params_after_probe,
                                          const Dataset& data,
                                          const ClientShard& shard,
                                          const TrainConfig& cfg);

struct ClientUpdate {
  std::size_t client_id = 0;
  const ModelParams* params = nullptr;
  std::size_t data_size = 0;
};

/// Data-size weighted mean, accumulated in ascending client_id order as
/// w_first + sum frac_i (w_i - w_first), so a consensus is returned exactly.
ModelParams fedavg_aggregate(std::span<const ClientUpdate> updates);

struct Evaluation {
  double accuracy = 0.0;
  double mean_loss = 0.0;
};

/// Argmax ties resolve to the lowest class index.
Evaluation evaluate(const ModelParams& params, const Dataset& data);

/// max_i ||global - local_i||_2; zero for an empty list.
double weight_divergence(const ModelParams& global,
                         std::span<const ModelParams> locals);

void save_model(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_model(const std::filesystem::path& path);

}  // namespace fedrank
