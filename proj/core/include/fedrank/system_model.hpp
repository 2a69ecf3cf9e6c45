#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

namespace fedrank {

/// Lognormal draw: median * exp(sigma * z).
struct LognormalParam {
  double median = 1.0;
  double sigma = 0.0;
};

struct HeterogeneitySpec {
  LognormalParam compute_time{1.0, 0.6};   // seconds per local epoch
  LognormalParam comm_time{2.0, 0.6};      // seconds per model upload+download
  LognormalParam compute_power{3.0, 0.4};  // watts
  LognormalParam comm_power{1.5, 0.4};     // watts
  /// Per-(device, round) multiplicative runtime noise, lognormal with median 1.
  double variation_sigma = 0.15;
  /// Fixed cost of reporting the probing state to the server.
  double report_time = 0.05;
  double report_energy = 0.05;

  void validate() const;
};

struct DeviceProfile {
  double compute_time = 1.0;
  double comm_time = 1.0;
  double compute_power = 1.0;
  double comm_power = 1.0;
  double variation_sigma = 0.0;
  bool use_trace = false;

  friend bool operator==(const DeviceProfile&, const DeviceProfile&) = default;
};

std::vector<DeviceProfile> sample_profiles(std::size_t n,
                                           const HeterogeneitySpec& spec,
                                           std::uint64_t seed);

/// Runtime multipliers indexed by (round, device), loaded from
/// `round,device_id,comp_mult,comm_mult` CSV.
class RuntimeTrace {
 public:
  struct Multipliers {
    double comp = 1.0;
    double comm = 1.0;
  };

  static RuntimeTrace load(const std::filesystem::path& path);
  void set(std::size_t round, std::size_t device, Multipliers m);

  /// Throws TraceExhausted when the trace has no row for (round, device).
  Multipliers at(std::size_t round, std::size_t device) const;
  std::size_t rounds() const { return rows_.size(); }

 private:
  std::vector<std::vector<std::optional<Multipliers>>> rows_;
};

struct DeviceCost {
  double t_comp = 0.0;  // one local epoch
  double t_comm = 0.0;
  double e_comp = 0.0;
  double e_comm = 0.0;
};

struct RoundCosts {
  std::vector<DeviceCost> devices;  // indexed by device id, whole pool
  double t_prob = 0.0;
  double e_prob = 0.0;
};

/// Applies round-`round` multipliers to every profile (lognormal draws from
/// derive(derive(derive(seed, round), device), "comp"/"comm"), or the trace row
/// for devices with use_trace). Energy is power times time.
/// T_prob = max over probed of (t_comp + report_time);
/// E_prob = sum over probed of (e_comp + report_energy).
RoundCosts realize_round_costs(std::span<const DeviceProfile> profiles,
                               std::size_t round,
                               std::span<const std::uint8_t> probed,
                               const HeterogeneitySpec& spec, std::uint64_t seed,
                               const RuntimeTrace* trace = nullptr);

/// T_prob + max over selected of (t_comm + t_comp * (l_ep - 1)).
double round_latency(const RoundCosts& costs, std::span<const std::uint8_t> selected,
                     std::size_t local_epochs);

/// E_prob + sum over selected of (e_comm + e_comp * (l_ep - 1)).
double round_energy(const RoundCosts& costs, std::span<const std::uint8_t> selected,
                    std::size_t local_epochs);

/// Without early exit every probed device runs all l_ep epochs before the
/// server decides; only the selected then upload.
/// max over probed of (t_comp * l_ep + report_time) + max over selected t_comm.
double vanilla_round_latency(const RoundCosts& costs,
                             std::span<const std::uint8_t> probed,
                             std::span<const std::uint8_t> selected,
                             std::size_t local_epochs, const HeterogeneitySpec& spec);

/// sum over probed of (e_comp * l_ep + report_energy) + sum over selected e_comm.
double vanilla_round_energy(const RoundCosts& costs,
                            std::span<const std::uint8_t> probed,
                            std::span<const std::uint8_t> selected,
                            std::size_t local_epochs, const HeterogeneitySpec& spec);

}  // namespace fedrank
