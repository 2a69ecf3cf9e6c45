#include "fedrank/reward.hpp"

#include <cmath>

#include "fedrank/errors.hpp"

namespace fedrank {

void RewardParams::validate() const {
  if (!(latency_budget > 0.0) || !(energy_budget > 0.0)) {
    throw InvalidSpec("reward budgets T and E must be positive");
  }
  if (!(alpha >= 0.0) || !(beta >= 0.0)) {
    throw InvalidSpec("penalty exponents alpha and beta must be non-negative");
  }
}

double compute_reward(double delta_acc, double round_latency, double round_energy,
                      const RewardParams& p) {
  if (!std::isfinite(delta_acc) || !std::isfinite(round_latency) ||
      !std::isfinite(round_energy)) {
    throw NumericError("non-finite reward input");
  }
  if (!(round_latency > 0.0) || !(round_energy > 0.0)) {
    throw InvalidSpec("round latency and energy must be positive");
  }
  double reward = delta_acc;
  if (p.latency_budget < round_latency) {
    reward *= std::pow(p.latency_budget / round_latency, p.alpha);
  }
  if (p.energy_budget < round_energy) {
    reward *= std::pow(p.energy_budget / round_energy, p.beta);
  }
  return reward;
}

}  // namespace fedrank
