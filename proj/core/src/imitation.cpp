#include "fedrank/imitation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedrank/errors.hpp"
#include "flat_file.hpp"

namespace fedrank {

std::size_t Demonstration::k() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1));
}

void Demonstration::validate() const {
  const std::size_t n = states.rows();
  if (states.values.size() != n * kStateDims || mask.size() != n || order.size() != n) {
    throw InvalidSpec("demonstration arrays disagree on the candidate count");
  }
  std::vector<std::uint8_t> seen(n, 0);
  for (auto i : order) {
    if (i >= n || seen[i]) throw InvalidSpec("demonstration order is not a permutation");
    seen[i] = 1;
  }
  const std::size_t k = this->k();
  if (k == 0) throw InvalidSpec("demonstration selects no device");
  for (std::size_t r = 0; r < k; ++r) {
    if (!mask[order[r]]) {
      throw InvalidSpec("demonstration order does not rank the selected devices first");
    }
  }
}

std::vector<Demonstration> collect_demonstrations(std::span<const std::string> experts,
                                                  const ExperimentConfig& env,
                                                  std::size_t rounds, std::uint64_t seed) {
  if (experts.empty()) throw InvalidSpec("imitation needs at least one expert");
  std::vector<Demonstration> demos;
  demos.reserve(experts.size() * rounds);
  for (const auto& name : experts) {
    ExperimentConfig cfg = env;
    cfg.seed = seed;
    cfg.rounds = rounds;
    cfg.policy = name;
    cfg.output_dir.clear();
    auto expert = make_analytical_policy(name, cfg.num_tiers);
    Simulation sim(cfg);
    sim.set_observer([&](const RoundObservation& obs) {
      demos.push_back({normalize_states(obs.candidates), obs.decision->mask,
                       obs.decision->order});
    });
    for (std::size_t t = 0; t < rounds; ++t) sim.run_round(*expert);
  }
  return demos;
}

LossAndGradient cloning_loss(const QNetwork& net, const Demonstration& demo,
                             CloningLoss kind) {
  const auto q = net.forward_all(demo.states);
  if (kind == CloningLoss::kPairwise) {
    std::vector<DevicePair> pairs;
    for (std::size_t i = 0; i < demo.mask.size(); ++i) {
      if (!demo.mask[i]) continue;
      for (std::size_t j = 0; j < demo.mask.size(); ++j) {
        if (!demo.mask[j]) pairs.emplace_back(i, j);
      }
    }
    const std::vector<double> ones(pairs.size(), 1.0);
    return pairwise_bce(q, pairs, ones);
  }
  LossAndGradient out{0.0, std::vector<double>(q.size(), 0.0)};
  const double scale = 1.0 / static_cast<double>(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double raw = pairwise_probability(q[i], 0.0);
    const double p = std::clamp(raw, kProbabilityClamp, 1.0 - kProbabilityClamp);
    const double y = demo.mask[i] ? 1.0 : 0.0;
    out.loss -= scale * (y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
    if (p == raw) out.grad[i] = scale * (raw - y);
  }
  return out;
}

double mean_cloning_loss(const QNetwork& net, std::span<const Demonstration> demos,
                         CloningLoss kind) {
  if (demos.empty()) return 0.0;
  double total = 0.0;
  for (const auto& d : demos) total += cloning_loss(net, d, kind).loss;
  return total / static_cast<double>(demos.size());
}

std::vector<double> pretrain(QNetwork& net, std::span<const Demonstration> demos,
                             const PretrainSettings& settings) {
  if (demos.empty()) throw InvalidSpec("pretraining needs demonstrations");
  if (settings.batch_size == 0) throw InvalidSpec("pretrain batch size must be positive");
  std::vector<double> curve;
  curve.reserve(settings.epochs);
  std::vector<std::size_t> order(demos.size());
  std::vector<double> grad(net.parameter_count());
  for (std::size_t epoch = 0; epoch < settings.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(settings.seed, epoch));
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += settings.batch_size) {
      const std::size_t len = std::min(settings.batch_size, order.size() - start);
      const double scale = 1.0 / static_cast<double>(len);
      std::fill(grad.begin(), grad.end(), 0.0);
      double batch_loss = 0.0;
      for (std::size_t b = start; b < start + len; ++b) {
        const auto& demo = demos[order[b]];
        const auto lg = cloning_loss(net, demo, settings.loss);
        batch_loss += lg.loss * scale;
        for (std::size_t i = 0; i < lg.grad.size(); ++i) {
          if (lg.grad[i] != 0.0) {
            net.accumulate_gradient(demo.states.row(i), scale * lg.grad[i], grad);
          }
        }
      }
      if (!std::isfinite(batch_loss)) {
        throw NumericError("non-finite cloning loss in epoch " + std::to_string(epoch),
                           batches);
      }
      auto theta = net.params();
      for (std::size_t i = 0; i < theta.size(); ++i) {
        theta[i] -= settings.learning_rate * grad[i];
      }
      epoch_loss += batch_loss;
      ++batches;
    }
    curve.push_back(epoch_loss / static_cast<double>(batches));
  }
  net.sync_target();
  return curve;
}

std::vector<Demonstration> collect_for_config(const ExperimentConfig& config) {
  const auto seeds = SeedStreams::from_master(config.seed);
  ExperimentConfig env = config;
  if (auto* s = std::get_if<SyntheticSpec>(&env.dataset); s && !env.dataset_seed_given) {
    s->seed = derive_seed(seeds.data, "dataset");
    if (auto* t = env.test_dataset ? std::get_if<SyntheticSpec>(&*env.test_dataset) : nullptr) {
      t->seed = s->seed;
    }
    env.dataset_seed_given = true;
  }
  return collect_demonstrations(config.imitation.experts, env, config.imitation.rounds,
                                seeds.imitation);
}

std::vector<double> pretrain_agent(FedRankAgent& agent, const ExperimentConfig& config,
                                   std::span<const Demonstration> demos) {
  const auto& im = config.imitation;
  const auto seeds = SeedStreams::from_master(config.seed);
  const PretrainSettings settings{im.epochs, im.batch_size, im.learning_rate,
                                  derive_seed(seeds.imitation, "pretrain"), im.loss};
  return pretrain(agent.net(), demos, settings);
}

double topk_agreement(std::span<const std::uint8_t> mask,
                      std::span<const std::uint8_t> expert_mask, std::size_t k) {
  if (mask.size() != expert_mask.size()) throw InvalidSpec("mask lengths differ");
  if (k == 0) throw InvalidSpec("k must be positive");
  std::size_t common = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] && expert_mask[i]) ++common;
  }
  return static_cast<double>(common) / static_cast<double>(k);
}

double mean_agreement(const QNetwork& net, std::span<const Demonstration> demos) {
  if (demos.empty()) return 0.0;
  double total = 0.0;
  for (const auto& d : demos) {
    const auto q = net.forward_all(d.states);
    const auto choice = top_k_decision(q, {}, d.k());
    total += topk_agreement(choice.mask, d.mask, d.k());
  }
  return total / static_cast<double>(demos.size());
}

void save_demonstrations(const std::filesystem::path& path,
                         std::span<const Demonstration> demos) {
  std::vector<unsigned char> out{'F', 'R', 'D', 'M'};
  detail::put_u32(out, 1);
  detail::put_u64(out, demos.size());
  for (const auto& d : demos) {
    d.validate();
    const auto rows = d.states.rows();
    detail::put_u32(out, static_cast<std::uint32_t>(rows));
    for (double v : d.states.values) detail::put_f64(out, v);
    for (auto m : d.mask) out.push_back(m ? 1 : 0);
    for (auto o : d.order) detail::put_u32(out, static_cast<std::uint32_t>(o));
  }
  detail::write_file_bytes(path, out);
}

std::vector<Demonstration> load_demonstrations(const std::filesystem::path& path) {
  detail::ByteReader in(detail::read_file_bytes(path), path.string());
  if (in.str(4) != "FRDM") throw ParseError(path.string() + ": bad magic at byte 0");
  const auto version = in.u32();
  if (version != 1) {
    throw ParseError(path.string() + ": unsupported version " + std::to_string(version) +
                     " at byte 4");
  }
  const auto count = in.u64();
  std::vector<Demonstration> demos;
  demos.reserve(count);
  for (std::uint64_t e = 0; e < count; ++e) {
    const auto entry_at = in.offset();
    Demonstration d;
    const std::size_t rows = in.u32();
    d.states.values.resize(rows * kStateDims);
    for (auto& v : d.states.values) v = in.f64();
    d.mask.resize(rows);
    for (auto& m : d.mask) m = in.u8();
    d.order.resize(rows);
    for (auto& o : d.order) o = in.u32();
    try {
      d.validate();
    } catch (const InvalidSpec& err) {
      throw ParseError(path.string() + ": entry at byte " + std::to_string(entry_at) +
                       ": " + err.what());
    }
    demos.push_back(std::move(d));
  }
  if (!in.at_end()) {
    throw ParseError(path.string() + ": trailing bytes at byte " + std::to_string(in.offset()));
  }
  return demos;
}

}  // namespace fedrank
