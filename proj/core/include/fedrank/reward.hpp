#pragma once

namespace fedrank {

struct RewardParams {
  double latency_budget = 1.0;  // T, seconds
  double energy_budget = 1.0;   // E, joules
  double alpha = 2.0;
  double beta = 2.0;

  void validate() const;
};

/// delta_acc * (T/R_T)^(alpha*[T < R_T]) * (E/R_E)^(beta*[E < R_E]).
/// A round inside both budgets returns delta_acc unchanged.
double compute_reward(double delta_acc, double round_latency, double round_energy,
                      const RewardParams& p);

}  // namespace fedrank
