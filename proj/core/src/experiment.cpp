#include "fedrank/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "fedrank/errors.hpp"
#include "fedrank/imitation.hpp"
#include "fedrank/rng.hpp"
#include "parallel.hpp"

namespace fedrank {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Dataset subset(const Dataset& src, std::span<const std::size_t> rows) {
  Dataset out;
  out.dims = src.dims;
  out.num_classes = src.num_classes;
  out.labels.reserve(rows.size());
  out.features.reserve(rows.size() * src.dims);
  for (auto r : rows) {
    out.labels.push_back(src.labels[r]);
    const auto x = src.row(r);
    out.features.insert(out.features.end(), x.begin(), x.end());
  }
  return out;
}

DatasetSource with_seed(DatasetSource source, bool seed_given, std::uint64_t derived) {
  if (auto* s = std::get_if<SyntheticSpec>(&source); s != nullptr && !seed_given) {
    s->seed = derived;
  }
  return source;
}

std::vector<std::uint8_t> probe_mask(const ExperimentConfig& cfg, std::uint64_t seed,
                                     std::size_t round) {
  const std::size_t n = cfg.pool_size;
  std::vector<std::uint8_t> mask(n, 1);
  if (cfg.probe_fraction >= 1.0) return mask;
  const auto want = std::max(
      cfg.clients_per_round,
      static_cast<std::size_t>(std::llround(cfg.probe_fraction * static_cast<double>(n))));
  if (want >= n) return mask;
  const auto pick = random_selection(n, want, derive_seed(seed, round));
  return pick.mask;
}

}  // namespace

SeedStreams SeedStreams::from_master(std::uint64_t master) {
  return {derive_seed(master, "data"),   derive_seed(master, "system"),
          derive_seed(master, "train"),  derive_seed(master, "policy"),
          derive_seed(master, "agent"),  derive_seed(master, "imitation")};
}

Simulation::Simulation(const ExperimentConfig& config)
    : config_(config), seeds_(SeedStreams::from_master(config.seed)) {
  config_.validate();
  const std::uint64_t dataset_seed = derive_seed(seeds_.data, "dataset");
  train_ = load_dataset(with_seed(config_.dataset, config_.dataset_seed_given, dataset_seed));
  if (config_.test_dataset) {
    test_ = load_dataset(
        with_seed(*config_.test_dataset, config_.dataset_seed_given, dataset_seed));
  } else {
    std::vector<std::size_t> order(train_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(seeds_.data, "holdout"));
    rng.shuffle(order);
    const auto n_test = std::max<std::size_t>(
        1, static_cast<std::size_t>(config_.test_fraction * static_cast<double>(order.size())));
    std::vector<std::size_t> test_rows(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
    std::vector<std::size_t> train_rows(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
    std::sort(test_rows.begin(), test_rows.end());
    std::sort(train_rows.begin(), train_rows.end());
    test_ = subset(train_, test_rows);
    train_ = subset(train_, train_rows);
  }
  if (test_.dims != train_.dims || test_.num_classes > train_.num_classes) {
    throw InvalidSpec("test set does not match the training set's shape");
  }
  test_.num_classes = train_.num_classes;

  shards_ = partition(train_, PartitionSpec{config_.pool_size, config_.regime, config_.sigma,
                                            derive_seed(seeds_.data, "partition")});
  profiles_ = sample_profiles(config_.pool_size, config_.system,
                              derive_seed(seeds_.system, "profiles"));
  if (config_.trace) {
    trace_ = RuntimeTrace::load(*config_.trace);
    for (auto& p : profiles_) p.use_trace = true;
  }
  global_ = init_params(config_.model, train_.dims,
                        static_cast<std::size_t>(train_.num_classes), config_.hidden,
                        derive_seed(seeds_.training, "init"));
  accuracy_ = evaluate(global_, test_).accuracy;
}

RoundRecord Simulation::run_round(SelectionPolicy& policy) {
  const std::size_t idx = round_;
  const std::size_t n = config_.pool_size;
  const std::size_t l_ep = config_.training.local_epochs;

  const auto probed = probe_mask(config_, derive_seed(seeds_.system, "availability"), idx);
  const auto costs = realize_round_costs(profiles_, idx, probed, config_.system,
                                         derive_seed(seeds_.system, "runtime"),
                                         trace_ ? &*trace_ : nullptr);

  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < n; ++i) {
    if (probed[i]) candidates.push_back(i);
  }
  auto client_cfg = [&](std::size_t client) {
    TrainConfig cfg = config_.training;
    cfg.seed = client_seed(seeds_.training, client, idx);
    return cfg;
  };

  RoundRecord rec;
  rec.t = idx + 1;

  std::vector<std::optional<ProbeResult>> probes(candidates.size());
  detail::parallel_for(candidates.size(), config_.threads, [&](std::size_t c) {
    const auto id = candidates[c];
    try {
      probes[c] = probe_epoch(global_, train_, shards_[id], client_cfg(id));
    } catch (const NumericError&) {
      probes[c].reset();
    }
  });

  std::vector<CandidateObservation> obs;
  std::vector<std::size_t> obs_slot;
  for (std::size_t c = 0; c < candidates.size(); ++c) {
    const auto id = candidates[c];
    if (!probes[c]) {
      rec.dropped.push_back(id);
      std::cerr << "round " << rec.t << ": client " << id << " dropped (probe diverged)\n";
      continue;
    }
    const auto& dc = costs.devices[id];
    obs.push_back({id, dc.t_comp, dc.t_comm, dc.e_comp, dc.e_comm, probes[c]->probing_loss,
                   shards_[id].data_size(), probes[c]->batch_losses});
    obs_slot.push_back(c);
  }
  if (obs.empty()) throw Error("round " + std::to_string(rec.t) + ": every candidate failed");
  const std::size_t k = std::min(config_.clients_per_round, obs.size());

  const SelectionContext ctx{idx, derive_seed(seeds_.policy, idx), l_ep,
                             config_.reward.latency_budget, config_.reward.alpha};
  const auto decision = policy.select(obs, k, ctx);
  if (decision.mask.size() != obs.size() || decision.count() != k) {
    throw InvalidAction(policy.name() + " returned an invalid selection");
  }
  if (observer_) observer_(RoundObservation{rec.t, obs, &decision});

  const auto chosen = decision.selected();
  std::vector<std::optional<LocalTrainingResult>> locals(chosen.size());
  detail::parallel_for(chosen.size(), config_.threads, [&](std::size_t s) {
    const auto& o = obs[chosen[s]];
    try {
      locals[s] = finish_local_training(probes[obs_slot[chosen[s]]]->params, train_,
                                        shards_[o.client_id], client_cfg(o.client_id));
    } catch (const NumericError&) {
      locals[s].reset();
    }
  });

  std::vector<std::uint8_t> selected_pool(n, 0), probed_pool(n, 0);
  for (const auto& o : obs) probed_pool[o.client_id] = 1;
  std::vector<ClientUpdate> updates;
  std::vector<ModelParams> local_models;
  for (std::size_t s = 0; s < chosen.size(); ++s) {
    const auto id = obs[chosen[s]].client_id;
    selected_pool[id] = 1;
    rec.selected.push_back(id);
    if (!locals[s]) {
      rec.dropped.push_back(id);
      std::cerr << "round " << rec.t << ": client " << id << " dropped (training diverged)\n";
      continue;
    }
    updates.push_back({id, &locals[s]->params, shards_[id].data_size()});
  }
  std::sort(rec.selected.begin(), rec.selected.end());
  if (!updates.empty()) {
    global_ = fedavg_aggregate(updates);
    for (const auto& u : updates) local_models.push_back(*u.params);
  }
  rec.divergence = weight_divergence(global_, local_models);

  const double before = accuracy_;
  accuracy_ = evaluate(global_, test_).accuracy;
  rec.accuracy = accuracy_;
  rec.delta_acc = accuracy_ - before;

  rec.probing_r_t = round_latency(costs, selected_pool, l_ep);
  rec.probing_r_e = round_energy(costs, selected_pool, l_ep);
  rec.vanilla_r_t = vanilla_round_latency(costs, probed_pool, selected_pool, l_ep, config_.system);
  rec.vanilla_r_e = vanilla_round_energy(costs, probed_pool, selected_pool, l_ep, config_.system);
  rec.r_t = config_.early_exit ? rec.probing_r_t : rec.vanilla_r_t;
  rec.r_e = config_.early_exit ? rec.probing_r_e : rec.vanilla_r_e;
  rec.rejected = obs.size() - k;

  rec.reward = compute_reward(rec.delta_acc, rec.r_t, rec.r_e, config_.reward);
  policy.observe_reward(rec.reward);
  if (auto diag = policy.last_update()) {
    rec.td_loss = diag->td_loss;
    rec.rank_loss = diag->rank_loss;
  }

  cum_time_ += rec.r_t;
  cum_energy_ += rec.r_e;
  rec.cum_time = cum_time_;
  rec.cum_energy = cum_energy_;
  ++round_;
  return rec;
}

std::optional<TargetHit> first_hit(const Summary& s, double target) {
  for (std::size_t i = 0; i < s.accuracy_curve.size(); ++i) {
    if (s.accuracy_curve[i] >= target) {
      return TargetHit{i + 1, s.time_curve.at(i), s.energy_curve.at(i)};
    }
  }
  return std::nullopt;
}

Summary summarize(const ExperimentConfig& config, std::span<const RoundRecord> records) {
  Summary s;
  s.policy = config.policy;
  s.seed = config.seed;
  s.rounds = records.size();
  s.target_accuracy = config.target_accuracy;
  double reward_sum = 0.0;
  for (const auto& r : records) {
    s.accuracy_curve.push_back(r.accuracy);
    s.time_curve.push_back(r.cum_time);
    s.energy_curve.push_back(r.cum_energy);
    s.best_accuracy = std::max(s.best_accuracy, r.accuracy);
    reward_sum += r.reward;
  }
  if (!records.empty()) {
    s.final_accuracy = records.back().accuracy;
    s.total_time = records.back().cum_time;
    s.total_energy = records.back().cum_energy;
    s.mean_reward = reward_sum / static_cast<double>(records.size());
  }
  if (auto hit = first_hit(s, s.target_accuracy)) {
    s.rounds_to_target = hit->round;
    s.time_to_target = hit->time;
    s.energy_to_target = hit->energy;
  }
  return s;
}

std::unique_ptr<SelectionPolicy> make_policy(const ExperimentConfig& config,
                                             FedRankAgent* agent) {
  if (config.policy == "fedrank") {
    if (agent == nullptr) throw InvalidSpec("fedrank policy needs an agent");
    return std::make_unique<FedRankPolicy>(*agent, config.rounds, config.online_learning);
  }
  return make_analytical_policy(config.policy, config.num_tiers);
}

FedRankAgent prepare_agent(const ExperimentConfig& config, std::vector<double>* pretrain_curve) {
  const auto seeds = SeedStreams::from_master(config.seed);
  FedRankAgent agent(config.agent, seeds.agent);
  const auto& im = config.imitation;
  if (im.checkpoint) {
    const auto loaded = FedRankAgent::load(*im.checkpoint);
    if (loaded.net().hidden1() != config.agent.hidden1 ||
        loaded.net().hidden2() != config.agent.hidden2) {
      throw InvalidSpec("checkpoint layer sizes differ from the agent config");
    }
    agent.net() = loaded.net();
    return agent;
  }
  if (!im.enabled) return agent;
  const auto demos = collect_for_config(config);
  auto curve = pretrain_agent(agent, config, demos);
  if (pretrain_curve) *pretrain_curve = std::move(curve);
  return agent;
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
  config.validate();
  ExperimentResult result;
  std::optional<FedRankAgent> agent;
  if (config.policy == "fedrank") agent.emplace(prepare_agent(config, &result.pretrain_curve));
  auto policy = make_policy(config, agent ? &*agent : nullptr);

  Simulation sim(config);
  result.records.reserve(config.rounds);
  for (std::size_t t = 0; t < config.rounds; ++t) result.records.push_back(sim.run_round(*policy));
  policy->end_episode();
  result.summary = summarize(config, result.records);

  if (!config.output_dir.empty()) {
    std::filesystem::create_directories(config.output_dir);
    {
      std::ofstream csv(config.output_dir / "rounds.csv");
      write_rounds_csv(csv, result.records);
    }
    auto summary = nlohmann::json::parse(summary_to_json(result.summary));
    if (config.baseline_summary) {
      const std::vector<Summary> pair{load_summary(*config.baseline_summary), result.summary};
      const double target = pair.front().target_accuracy;
      summary["comparison"] = nlohmann::json::parse(comparison_to_json(compare_runs(pair), target));
    }
    std::ofstream(config.output_dir / "summary.json") << summary.dump(2) << "\n";
    if (agent) agent->save(config.output_dir / "agent.ckpt");
  }
  return result;
}

void write_rounds_csv(std::ostream& out, std::span<const RoundRecord> records) {
  out << kRoundsCsvHeader << "\n";
  for (const auto& r : records) {
    out << r.t << ",";
    for (std::size_t i = 0; i < r.selected.size(); ++i) {
      if (i) out << ";";
      out << r.selected[i];
    }
    out << "," << fmt_double(r.accuracy) << "," << fmt_double(r.delta_acc) << ","
        << fmt_double(r.r_t) << "," << fmt_double(r.r_e) << "," << fmt_double(r.reward) << ","
        << fmt_double(r.cum_time) << "," << fmt_double(r.cum_energy) << ","
        << fmt_double(r.divergence) << ",";
    if (r.td_loss) out << fmt_double(*r.td_loss);
    out << ",";
    if (r.rank_loss) out << fmt_double(*r.rank_loss);
    out << "\n";
  }
}

namespace {

template <typename T>
nlohmann::json opt(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

template <typename T>
std::optional<T> get_opt(const nlohmann::json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  return it->get<T>();
}

}  // namespace

std::string summary_to_json(const Summary& s) {
  nlohmann::json j = {{"schema_version", kConfigSchemaVersion},
                      {"policy", s.policy},
                      {"seed", s.seed},
                      {"rounds", s.rounds},
                      {"final_accuracy", s.final_accuracy},
                      {"best_accuracy", s.best_accuracy},
                      {"target_accuracy", s.target_accuracy},
                      {"rounds_to_target", opt(s.rounds_to_target)},
                      {"time_to_target", opt(s.time_to_target)},
                      {"energy_to_target", opt(s.energy_to_target)},
                      {"total_time", s.total_time},
                      {"total_energy", s.total_energy},
                      {"mean_reward", s.mean_reward},
                      {"curve",
                       {{"accuracy", s.accuracy_curve},
                        {"cum_time", s.time_curve},
                        {"cum_energy", s.energy_curve}}}};
  return j.dump(2);
}

Summary summary_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    Summary s;
    s.policy = j.at("policy").get<std::string>();
    s.seed = j.value("seed", std::uint64_t{0});
    s.rounds = j.at("rounds").get<std::size_t>();
    s.final_accuracy = j.at("final_accuracy").get<double>();
    s.best_accuracy = j.value("best_accuracy", s.final_accuracy);
    s.target_accuracy = j.at("target_accuracy").get<double>();
    s.rounds_to_target = get_opt<std::size_t>(j, "rounds_to_target");
    s.time_to_target = get_opt<double>(j, "time_to_target");
    s.energy_to_target = get_opt<double>(j, "energy_to_target");
    s.total_time = j.at("total_time").get<double>();
    s.total_energy = j.at("total_energy").get<double>();
    s.mean_reward = j.value("mean_reward", 0.0);
    const auto& c = j.at("curve");
    s.accuracy_curve = c.at("accuracy").get<std::vector<double>>();
    s.time_curve = c.at("cum_time").get<std::vector<double>>();
    s.energy_curve = c.at("cum_energy").get<std::vector<double>>();
    if (s.time_curve.size() != s.accuracy_curve.size() ||
        s.energy_curve.size() != s.accuracy_curve.size()) {
      throw ParseError("summary curves differ in length");
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("summary: ") + e.what());
  }
}

Summary load_summary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open summary " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return summary_from_json(ss.str());
}

std::vector<ComparisonRow> compare_runs(std::span<const Summary> summaries,
                                        std::optional<double> target) {
  if (summaries.empty()) throw InvalidSpec("compare needs at least one summary");
  const auto& base = summaries.front();
  const double goal = target.value_or(base.target_accuracy);
  const auto base_hit = first_hit(base, goal);
  std::vector<ComparisonRow> rows;
  for (const auto& s : summaries) {
    ComparisonRow row;
    row.name = s.policy + " (seed " + std::to_string(s.seed) + ")";
    row.final_accuracy = s.final_accuracy;
    const auto hit = first_hit(s, goal);
    row.reached = hit.has_value();
    if (hit) row.rounds_to_target = hit->round;
    if (hit && base_hit) {
      if (base_hit->energy > 0.0) row.energy_percent = 100.0 * hit->energy / base_hit->energy;
      row.speed_rounds = static_cast<double>(base_hit->round) / static_cast<double>(hit->round);
      if (hit->time > 0.0) row.speed_time = base_hit->time / hit->time;
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string comparison_to_json(std::span<const ComparisonRow> rows, double target) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& r : rows) {
    arr.push_back({{"name", r.name},
                   {"final_accuracy", r.final_accuracy},
                   {"rounds_to_target", opt(r.rounds_to_target)},
                   {"energy_percent", opt(r.energy_percent)},
                   {"speed_rounds", opt(r.speed_rounds)},
                   {"speed_time", opt(r.speed_time)},
                   {"reached_target", r.reached}});
  }
  return nlohmann::json{{"target_accuracy", target}, {"baseline", rows.empty() ? "" : rows.front().name},
                        {"rows", arr}}
      .dump(2);
}

std::string format_comparison(std::span<const ComparisonRow> rows, double target) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "target accuracy %.4f (baseline: %s)\n", target,
                rows.empty() ? "-" : rows.front().name.c_str());
  out << line;
  std::snprintf(line, sizeof line, "%-28s %8s %8s %10s %10s %10s\n", "run", "acc(%)", "rounds",
                "energy(%)", "speed", "speed_t");
  out << line;
  auto cell = [](const std::optional<double>& v, const char* fmt) {
    if (!v) return std::string("null");
    char b[32];
    std::snprintf(b, sizeof b, fmt, *v);
    return std::string(b);
  };
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-28s %8.2f %8s %10s %10s %10s%s\n", r.name.c_str(),
                  100.0 * r.final_accuracy,
                  r.rounds_to_target ? std::to_string(*r.rounds_to_target).c_str() : "null",
                  cell(r.energy_percent, "%.1f").c_str(), cell(r.speed_rounds, "%.2fx").c_str(),
                  cell(r.speed_time, "%.2fx").c_str(), r.reached ? "" : "  [target not reached]");
    out << line;
  }
  return out.str();
}

}  // namespace fedrank
