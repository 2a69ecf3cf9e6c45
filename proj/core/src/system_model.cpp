#include "fedrank/system_model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "fedrank/errors.hpp"
#include "fedrank/rng.hpp"

namespace fedrank {

namespace {

void check_param(const LognormalParam& p, const char* name) {
  if (!(p.median > 0.0) || !std::isfinite(p.median)) {
    throw InvalidSpec(std::string(name) + " median must be positive");
  }
  if (!(p.sigma >= 0.0) || !std::isfinite(p.sigma)) {
    throw InvalidSpec(std::string(name) + " sigma must be non-negative");
  }
}

double draw(const LognormalParam& p, Rng& rng) {
  if (p.sigma == 0.0) return p.median;
  return p.median * std::exp(p.sigma * rng.normal());
}

double lognormal_multiplier(double sigma, std::uint64_t seed) {
  if (sigma == 0.0) return 1.0;
  Rng rng(seed);
  return std::exp(sigma * rng.normal());
}

void require_selection(std::span<const std::uint8_t> selected, std::size_t pool) {
  if (selected.size() != pool) {
    throw InvalidAction("selection mask length " + std::to_string(selected.size()) +
                        " differs from pool size " + std::to_string(pool));
  }
  if (std::none_of(selected.begin(), selected.end(), [](auto a) { return a != 0; })) {
    throw InvalidAction("no device selected");
  }
}

}  // namespace

void HeterogeneitySpec::validate() const {
  check_param(compute_time, "compute_time");
  check_param(comm_time, "comm_time");
  check_param(compute_power, "compute_power");
  check_param(comm_power, "comm_power");
  if (!(variation_sigma >= 0.0)) throw InvalidSpec("variation_sigma must be >= 0");
  if (!(report_time >= 0.0) || !(report_energy >= 0.0)) {
    throw InvalidSpec("report costs must be non-negative");
  }
}

std::vector<DeviceProfile> sample_profiles(std::size_t n,
                                           const HeterogeneitySpec& spec,
                                           std::uint64_t seed) {
  spec.validate();
  std::vector<DeviceProfile> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, i));
    auto& p = out[i];
    p.compute_time = draw(spec.compute_time, rng);
    p.comm_time = draw(spec.comm_time, rng);
    p.compute_power = draw(spec.compute_power, rng);
    p.comm_power = draw(spec.comm_power, rng);
    p.variation_sigma = spec.variation_sigma;
  }
  return out;
}

RuntimeTrace RuntimeTrace::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ParseError(path.string() + ":1: empty trace");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "round,device_id,comp_mult,comm_mult") {
    throw ParseError(path.string() +
                     ":1: header must be round,device_id,comp_mult,comm_mult");
  }
  RuntimeTrace trace;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string cell[4];
    for (int i = 0; i < 4; ++i) {
      if (!std::getline(ss, cell[i], ',')) {
        throw ParseError(path.string() + ":" + std::to_string(line_no) +
                         ": expected 4 fields");
      }
    }
    std::size_t round = 0, device = 0;
    Multipliers m;
    auto bad = [&](int col) {
      return ParseError(path.string() + ":" + std::to_string(line_no) +
                        ": bad value in column " + std::to_string(col + 1));
    };
    auto parse = [&](int col, auto& out) {
      const auto& s = cell[col];
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
      if (ec != std::errc{} || p != s.data() + s.size()) throw bad(col);
    };
    parse(0, round);
    parse(1, device);
    parse(2, m.comp);
    parse(3, m.comm);
    if (!(m.comp > 0.0) || !(m.comm > 0.0)) throw bad(m.comp > 0.0 ? 3 : 2);
    trace.set(round, device, m);
  }
  return trace;
}

void RuntimeTrace::set(std::size_t round, std::size_t device, Multipliers m) {
  if (rows_.size() <= round) rows_.resize(round + 1);
  auto& row = rows_[round];
  if (row.size() <= device) row.resize(device + 1);
  row[device] = m;
}

RuntimeTrace::Multipliers RuntimeTrace::at(std::size_t round,
                                           std::size_t device) const {
  if (round >= rows_.size() || device >= rows_[round].size() ||
      !rows_[round][device]) {
    throw TraceExhausted("trace has no entry for round " + std::to_string(round) +
                         ", device " + std::to_string(device));
  }
  return *rows_[round][device];
}

RoundCosts realize_round_costs(std::span<const DeviceProfile> profiles,
                               std::size_t round,
                               std::span<const std::uint8_t> probed,
                               const HeterogeneitySpec& spec, std::uint64_t seed,
                               const RuntimeTrace* trace) {
  if (probed.size() != profiles.size()) {
    throw InvalidAction("probe mask length differs from pool size");
  }
  RoundCosts costs;
  costs.devices.resize(profiles.size());
  const std::uint64_t round_seed = derive_seed(seed, round);
  for (std::size_t i = 0; i < profiles.size(); ++i) {
    const auto& p = profiles[i];
    double comp_mult = 1.0, comm_mult = 1.0;
    if (p.use_trace) {
      if (trace == nullptr) throw InvalidSpec("device uses a trace but none is loaded");
      const auto m = trace->at(round, i);
      comp_mult = m.comp;
      comm_mult = m.comm;
    } else {
      const std::uint64_t dev_seed = derive_seed(round_seed, i);
      comp_mult = lognormal_multiplier(p.variation_sigma, derive_seed(dev_seed, "comp"));
      comm_mult = lognormal_multiplier(p.variation_sigma, derive_seed(dev_seed, "comm"));
    }
    auto& c = costs.devices[i];
    c.t_comp = p.compute_time * comp_mult;
    c.t_comm = p.comm_time * comm_mult;
    c.e_comp = p.compute_power * c.t_comp;
    c.e_comm = p.comm_power * c.t_comm;
    if (probed[i]) {
      costs.t_prob = std::max(costs.t_prob, c.t_comp + spec.report_time);
      costs.e_prob += c.e_comp + spec.report_energy;
    }
  }
  return costs;
}

double round_latency(const RoundCosts& costs, std::span<const std::uint8_t> selected,
                     std::size_t local_epochs) {
  require_selection(selected, costs.devices.size());
  const double tail = static_cast<double>(local_epochs) - 1.0;
  double slowest = 0.0;
  for (std::size_t i = 0; i < selected.size(); ++i) {
    if (!selected[i]) continue;
    const auto& c = costs.devices[i];
    slowest = std::max(slowest, c.t_comm + c.t_comp * tail);
  }
  return costs.t_prob + slowest;
}

double round_energy(const RoundCosts& costs, std::span<const std::uint8_t> selected,
                    std::size_t local_epochs) {
  require_selection(selected, costs.devices.size());
  const double tail = static_cast<double>(local_epochs) - 1.0;
  double total = 0.0;
  for (std::size_t i = 0; i < selected.size(); ++i) {
    if (!selected[i]) continue;
    const auto& c = costs.devices[i];
    total += c.e_comm + c.e_comp * tail;
  }
  return costs.e_prob + total;
}

double vanilla_round_latency(const RoundCosts& costs,
                             std::span<const std::uint8_t> probed,
                             std::span<const std::uint8_t> selected,
                             std::size_t local_epochs, const HeterogeneitySpec& spec) {
  require_selection(selected, costs.devices.size());
  const double epochs = static_cast<double>(local_epochs);
  double train = 0.0, upload = 0.0;
  for (std::size_t i = 0; i < costs.devices.size(); ++i) {
    const auto& c = costs.devices[i];
    if (probed[i]) train = std::max(train, c.t_comp * epochs + spec.report_time);
    if (selected[i]) upload = std::max(upload, c.t_comm);
  }
  return train + upload;
}

double vanilla_round_energy(const RoundCosts& costs,
                            std::span<const std::uint8_t> probed,
                            std::span<const std::uint8_t> selected,
                            std::size_t local_epochs, const HeterogeneitySpec& spec) {
  require_selection(selected, costs.devices.size());
  const double epochs = static_cast<double>(local_epochs);
  double total = 0.0;
  for (std::size_t i = 0; i < costs.devices.size(); ++i) {
    const auto& c = costs.devices[i];
    if (probed[i]) total += c.e_comp * epochs + spec.report_energy;
    if (selected[i]) total += c.e_comm;
  }
  return total;
}

}  // namespace fedrank
