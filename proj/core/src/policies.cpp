#include "fedrank/policies.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedrank/errors.hpp"
#include "fedrank/rng.hpp"

namespace fedrank {

namespace {

SelectionDecision from_order(std::vector<std::size_t> order, std::size_t k) {
  SelectionDecision d;
  d.mask.assign(order.size(), 0);
  for (std::size_t r = 0; r < k; ++r) d.mask[order[r]] = 1;
  d.order = std::move(order);
  return d;
}

}  // namespace

std::array<double, CandidateObservation::kNumFeatures> CandidateObservation::features()
    const {
  return {t_comp, t_comm, e_comp, e_comm, probing_loss, static_cast<double>(data_size)};
}

std::size_t SelectionDecision::count() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1));
}

std::vector<std::size_t> SelectionDecision::selected() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) out.push_back(i);
  }
  return out;
}

double projected_round_time(const CandidateObservation& obs, std::size_t local_epochs) {
  return obs.t_comm + obs.t_comp * (static_cast<double>(local_epochs) - 1.0);
}

void check_selection_size(std::size_t k, std::size_t n) {
  if (k == 0) throw InvalidSpec("must select at least one device");
  if (k > n) {
    throw InvalidSpec("cannot select " + std::to_string(k) + " of " +
                      std::to_string(n) + " candidates");
  }
}

SelectionDecision top_k_decision(std::span<const double> scores,
                                 std::span<const CandidateObservation> obs,
                                 std::size_t k, bool ascending) {
  check_selection_size(k, scores.size());
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) {
      return ascending ? scores[a] < scores[b] : scores[a] > scores[b];
    }
    const auto ida = obs.empty() ? a : obs[a].client_id;
    const auto idb = obs.empty() ? b : obs[b].client_id;
    return ida < idb;
  });
  return from_order(std::move(order), k);
}

SelectionDecision random_selection(std::size_t n, std::size_t k, std::uint64_t seed) {
  check_selection_size(k, n);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order);
  return from_order(std::move(order), k);
}

SelectionDecision RandomPolicy::select(std::span<const CandidateObservation> observations,
                                       std::size_t k, const SelectionContext& ctx) {
  return random_selection(observations.size(), k, derive_seed(ctx.seed, "random"));
}

double oort_utility(const CandidateObservation& obs, double latency_budget,
                    double alpha, std::size_t local_epochs) {
  const auto& losses = obs.batch_losses;
  if (losses.empty()) return 0.0;
  double sq = 0.0;
  for (double l : losses) sq += l * l;
  const double batches = static_cast<double>(losses.size());
  double utility = batches * std::sqrt(sq / batches);
  const double t = projected_round_time(obs, local_epochs);
  if (latency_budget < t) utility *= std::pow(latency_budget / t, alpha);
  return utility;
}

SelectionDecision OortPolicy::select(std::span<const CandidateObservation> observations,
                                     std::size_t k, const SelectionContext& ctx) {
  std::vector<double> scores;
  scores.reserve(observations.size());
  for (const auto& o : observations) {
    scores.push_back(oort_utility(o, ctx.latency_budget, ctx.alpha, ctx.local_epochs));
  }
  return top_k_decision(scores, observations, k);
}

LatencyTierPolicy::LatencyTierPolicy(std::size_t num_tiers) : num_tiers_(num_tiers) {
  if (num_tiers == 0) throw InvalidSpec("num_tiers must be positive");
}

SelectionDecision LatencyTierPolicy::select(
    std::span<const CandidateObservation> observations, std::size_t k,
    const SelectionContext& ctx) {
  const std::size_t n = observations.size();
  check_selection_size(k, n);
  std::vector<double> times;
  times.reserve(n);
  for (const auto& o : observations) times.push_back(projected_round_time(o, ctx.local_epochs));
  const auto by_time = top_k_decision(times, observations, n, /*ascending=*/true).order;

  const std::size_t tiers = std::min(num_tiers_, n);
  auto tier_members = [&](std::size_t t) {
    return std::vector<std::size_t>(by_time.begin() + static_cast<std::ptrdiff_t>(t * n / tiers),
                                    by_time.begin() + static_cast<std::ptrdiff_t>((t + 1) * n / tiers));
  };
  const std::size_t home = calls_++ % tiers;

  std::vector<std::size_t> visit{home};
  for (std::size_t step = 1; visit.size() < tiers; ++step) {
    if (home + step < tiers) visit.push_back(home + step);
    if (step <= home) visit.push_back(home - step);
  }

  std::vector<std::size_t> order;
  order.reserve(n);
  for (auto t : visit) {
    auto members = tier_members(t);
    std::sort(members.begin(), members.end(), [&](std::size_t a, std::size_t b) {
      const auto& oa = observations[a];
      const auto& ob = observations[b];
      if (oa.probing_loss != ob.probing_loss) return oa.probing_loss < ob.probing_loss;
      return oa.client_id < ob.client_id;
    });
    order.insert(order.end(), members.begin(), members.end());
  }
  return from_order(std::move(order), k);
}

SelectionDecision GreedyLossPolicy::select(
    std::span<const CandidateObservation> observations, std::size_t k,
    const SelectionContext&) {
  std::vector<double> scores;
  scores.reserve(observations.size());
  for (const auto& o : observations) scores.push_back(o.probing_loss);
  return top_k_decision(scores, observations, k);
}

SelectionDecision GreedyLatencyPolicy::select(
    std::span<const CandidateObservation> observations, std::size_t k,
    const SelectionContext& ctx) {
  std::vector<double> times;
  times.reserve(observations.size());
  for (const auto& o : observations) times.push_back(projected_round_time(o, ctx.local_epochs));
  return top_k_decision(times, observations, k, /*ascending=*/true);
}

std::unique_ptr<SelectionPolicy> make_analytical_policy(const std::string& name,
                                                        std::size_t num_tiers) {
  if (name == "random") return std::make_unique<RandomPolicy>();
  if (name == "oort") return std::make_unique<OortPolicy>();
  if (name == "tier") return std::make_unique<LatencyTierPolicy>(num_tiers);
  if (name == "greedy_loss") return std::make_unique<GreedyLossPolicy>();
  if (name == "greedy_latency") return std::make_unique<GreedyLatencyPolicy>();
  throw InvalidSpec("unknown analytical policy \"" + name + "\"");
}

}  // namespace fedrank
