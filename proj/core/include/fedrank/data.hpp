#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace fedrank {

/// Row-major feature matrix plus class labels.
struct Dataset {
  std::vector<double> features;
  std::vector<int> labels;
  std::size_t dims = 0;
  int num_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::span<const double> row(std::size_t i) const noexcept {
    return {features.data() + i * dims, dims};
  }
  /// Throws InvalidSpec if any invariant is broken.
  void validate() const;
};

/// Class-conditional Gaussian clusters. Means are drawn from `seed` alone, so
/// a train/test pair that differs only in `split` shares its clusters.
struct SyntheticSpec {
  int num_classes = 10;
  std::size_t dims = 2;
  std::size_t samples = 1000;
  double cluster_spread = 1.0;
  double mean_scale = 1.0;
  std::uint64_t seed = 0;
  std::string split = "train";
};

struct IdxSource {
  std::filesystem::path images;
  std::filesystem::path labels;
};

/// CSV with a header row; the column named "label" holds class indices and
/// every other column is a feature.
struct CsvSource {
  std::filesystem::path path;
};

using DatasetSource = std::variant<SyntheticSpec, IdxSource, CsvSource>;

Dataset load_dataset(const DatasetSource& source);
Dataset make_synthetic(const SyntheticSpec& spec);
Dataset read_idx(const std::filesystem::path& images,
                 const std::filesystem::path& labels);
Dataset read_csv(const std::filesystem::path& path);

enum class PartitionRegime { kIid, kDirichlet };

struct PartitionSpec {
  std::size_t num_clients = 1;
  PartitionRegime regime = PartitionRegime::kIid;
  double sigma = 1.0;
  std::uint64_t seed = 0;
};

struct ClientShard {
  std::size_t client_id = 0;
  std::vector<std::size_t> example_indices;  // ascending

  std::size_t data_size() const noexcept { return example_indices.size(); }
};

/// Splits `dataset` across `spec.num_clients` shards.
///
/// IID: one seeded shuffle of all rows, cut into contiguous chunks whose
/// sizes differ by at most one (the first n % N chunks take the extra row).
///
/// Dirichlet: for each class c in ascending order, draw p ~ Dir(sigma) over
/// the N clients, then shuffle that class's rows (ascending order before the
/// shuffle). Client counts are floor(p_i * n_c) plus one for the n_c - sum
/// clients with the largest fractional remainders (ties to the lower id).
/// Rows are dealt to clients 0..N-1 in that order. Afterwards every empty
/// client, in ascending id, takes the most recently dealt row of the current
/// largest shard (ties to the lower id). Shard indices are sorted at the end.
std::vector<ClientShard> partition(const Dataset& dataset,
                                   const PartitionSpec& spec);

/// Per-client label histogram.
std::vector<std::vector<std::size_t>> label_histograms(
    const Dataset& dataset, std::span<const ClientShard> shards);

/// Shannon entropy (nats) of a histogram; zero for an empty one.
double label_entropy(std::span<const std::size_t> histogram);

}  // namespace fedrank
