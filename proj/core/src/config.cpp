#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "fedrank/errors.hpp"
#include "fedrank/experiment.hpp"

namespace fedrank {

namespace {

using nlohmann::json;

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end() && !it->is_null()) out = it->get<T>();
}

void read_lognormal(const json& j, const char* key, LognormalParam& out) {
  auto it = j.find(key);
  if (it == j.end()) return;
  if (it->is_number()) {
    out.median = it->get<double>();
    out.sigma = 0.0;
    return;
  }
  read(*it, "median", out.median);
  read(*it, "sigma", out.sigma);
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  if (path.is_absolute() || base.empty()) return path;
  return base / path;
}

DatasetSource parse_source(const json& j, const std::filesystem::path& base,
                           bool* seed_given, std::size_t* test_samples) {
  const auto type = j.value("type", std::string("synthetic"));
  if (type == "synthetic") {
    SyntheticSpec s;
    read(j, "num_classes", s.num_classes);
    read(j, "dims", s.dims);
    read(j, "samples", s.samples);
    read(j, "cluster_spread", s.cluster_spread);
    read(j, "mean_scale", s.mean_scale);
    read(j, "split", s.split);
    if (j.contains("seed")) {
      s.seed = j.at("seed").get<std::uint64_t>();
      if (seed_given) *seed_given = true;
    }
    if (test_samples) read(j, "test_samples", *test_samples);
    return s;
  }
  if (type == "idx") {
    return IdxSource{resolve(base, j.at("images").get<std::string>()),
                     resolve(base, j.at("labels").get<std::string>())};
  }
  if (type == "csv") return CsvSource{resolve(base, j.at("path").get<std::string>())};
  throw InvalidSpec("unknown dataset type \"" + type + "\"");
}

ExperimentConfig parse(const std::string& text, const std::filesystem::path& base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  if (!j.is_object()) throw ParseError("config: top level must be an object");
  const int schema = j.value("schema_version", -1);
  if (schema != kConfigSchemaVersion) {
    throw InvalidSpec("config schema_version must be " + std::to_string(kConfigSchemaVersion));
  }

  ExperimentConfig c;
  try {
    read(j, "seed", c.seed);
    read(j, "pool_size", c.pool_size);
    read(j, "clients_per_round", c.clients_per_round);
    read(j, "rounds", c.rounds);
    read(j, "target_accuracy", c.target_accuracy);
    read(j, "test_fraction", c.test_fraction);
    read(j, "early_exit", c.early_exit);
    read(j, "probe_fraction", c.probe_fraction);
    read(j, "threads", c.threads);

    std::size_t test_samples = 0;
    if (auto it = j.find("dataset"); it != j.end()) {
      c.dataset = parse_source(*it, base, &c.dataset_seed_given, &test_samples);
    }
    if (auto it = j.find("test_dataset"); it != j.end() && !it->is_null()) {
      c.test_dataset = parse_source(*it, base, nullptr, nullptr);
    } else if (auto* s = std::get_if<SyntheticSpec>(&c.dataset)) {
      SyntheticSpec t = *s;
      t.split = "test";
      t.samples = test_samples > 0 ? test_samples
                                   : std::max<std::size_t>(
                                         static_cast<std::size_t>(t.num_classes), s->samples / 4);
      c.test_dataset = t;
    }

    if (auto it = j.find("partition"); it != j.end()) {
      const auto regime = it->value("regime", std::string("dirichlet"));
      if (regime == "iid") {
        c.regime = PartitionRegime::kIid;
      } else if (regime == "dirichlet") {
        c.regime = PartitionRegime::kDirichlet;
      } else {
        throw InvalidSpec("unknown partition regime \"" + regime + "\"");
      }
      read(*it, "sigma", c.sigma);
    }
    if (auto it = j.find("model"); it != j.end()) {
      if (it->is_string()) {
        c.model = model_kind_from_string(it->get<std::string>());
      } else {
        c.model = model_kind_from_string(it->value("kind", std::string("softmax_regression")));
        read(*it, "hidden", c.hidden);
      }
    }
    if (auto it = j.find("training"); it != j.end()) {
      read(*it, "learning_rate", c.training.learning_rate);
      read(*it, "batch_size", c.training.batch_size);
      read(*it, "local_epochs", c.training.local_epochs);
    }
    if (auto it = j.find("system"); it != j.end()) {
      auto& s = c.system;
      read_lognormal(*it, "compute_time", s.compute_time);
      read_lognormal(*it, "comm_time", s.comm_time);
      read_lognormal(*it, "compute_power", s.compute_power);
      read_lognormal(*it, "comm_power", s.comm_power);
      read(*it, "variation_sigma", s.variation_sigma);
      read(*it, "report_time", s.report_time);
      read(*it, "report_energy", s.report_energy);
      if (it->contains("trace") && !it->at("trace").is_null()) {
        c.trace = resolve(base, it->at("trace").get<std::string>());
      }
    }
    if (auto it = j.find("reward"); it != j.end()) {
      read(*it, "T", c.reward.latency_budget);
      read(*it, "E", c.reward.energy_budget);
      read(*it, "alpha", c.reward.alpha);
      read(*it, "beta", c.reward.beta);
    }
    if (auto it = j.find("policy"); it != j.end()) {
      if (it->is_string()) {
        c.policy = it->get<std::string>();
      } else {
        read(*it, "name", c.policy);
        read(*it, "num_tiers", c.num_tiers);
        read(*it, "online_learning", c.online_learning);
      }
    }
    if (auto it = j.find("agent"); it != j.end()) {
      auto& a = c.agent;
      read(*it, "gamma", a.gamma);
      read(*it, "rank_weight", a.rank_weight);
      read(*it, "learning_rate", a.learning_rate);
      read(*it, "target_sync_period", a.target_sync_period);
      read(*it, "explore_start", a.explore_start);
      read(*it, "explore_end", a.explore_end);
      read(*it, "hidden1", a.hidden1);
      read(*it, "hidden2", a.hidden2);
      read(*it, "cache_capacity", a.cache_capacity);
      read(*it, "batch_size", a.batch_size);
      read(*it, "max_pairs", a.max_pairs);
      read(*it, "updates_per_round", a.updates_per_round);
      read(*it, "output_init_scale", a.output_init_scale);
    }
    if (auto it = j.find("imitation"); it != j.end()) {
      auto& im = c.imitation;
      read(*it, "enabled", im.enabled);
      read(*it, "experts", im.experts);
      read(*it, "rounds", im.rounds);
      read(*it, "epochs", im.epochs);
      read(*it, "batch_size", im.batch_size);
      read(*it, "learning_rate", im.learning_rate);
      const auto loss = it->value("loss", std::string("pairwise"));
      if (loss == "pairwise") {
        im.loss = CloningLoss::kPairwise;
      } else if (loss == "pointwise") {
        im.loss = CloningLoss::kPointwise;
      } else {
        throw InvalidSpec("unknown imitation loss \"" + loss + "\"");
      }
      if (it->contains("checkpoint") && !it->at("checkpoint").is_null()) {
        im.checkpoint = resolve(base, it->at("checkpoint").get<std::string>());
      }
    }
    if (auto it = j.find("output_dir"); it != j.end() && !it->is_null()) {
      c.output_dir = resolve(base, it->get<std::string>());
    }
    if (auto it = j.find("baseline_summary"); it != j.end() && !it->is_null()) {
      c.baseline_summary = resolve(base, it->get<std::string>());
    }
  } catch (const json::exception& e) {
    throw InvalidSpec(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (pool_size == 0) throw InvalidSpec("pool_size must be positive");
  if (clients_per_round == 0 || clients_per_round > pool_size) {
    throw InvalidSpec("clients_per_round must lie in [1, pool_size]");
  }
  if (rounds == 0) throw InvalidSpec("rounds must be >= 1");
  if (!(target_accuracy >= 0.0 && target_accuracy <= 1.0)) {
    throw InvalidSpec("target_accuracy must lie in [0, 1]");
  }
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw InvalidSpec("test_fraction must lie in (0, 1)");
  }
  if (regime == PartitionRegime::kDirichlet && !(sigma > 0.0)) {
    throw InvalidSpec("Dirichlet sigma must be positive");
  }
  if (!(probe_fraction > 0.0 && probe_fraction <= 1.0)) {
    throw InvalidSpec("probe_fraction must lie in (0, 1]");
  }
  training.validate();
  system.validate();
  reward.validate();
  agent.validate();
  if (policy == "fedrank") {
    if (imitation.enabled && imitation.experts.empty() && !imitation.checkpoint) {
      throw InvalidSpec("imitation needs at least one expert");
    }
  } else {
    make_analytical_policy(policy, num_tiers);
  }
  for (const auto& e : imitation.experts) make_analytical_policy(e, num_tiers);
}

ExperimentConfig parse_config(const std::string& json_text) { return parse(json_text, {}); }

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.parent_path());
}

}  // namespace fedrank
