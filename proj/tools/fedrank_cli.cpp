#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "fedrank/errors.hpp"
#include "fedrank/experiment.hpp"
#include "fedrank/imitation.hpp"

namespace {

using namespace fedrank;

// Exit codes: 0 ok, 1 runtime failure, 2 bad input (config, files, CLI).
constexpr int kExitRuntime = 1;
constexpr int kExitInput = 2;

int cmd_run(const std::string& config_path, std::optional<std::uint64_t> seed,
            const std::string& out) {
  auto config = load_config(config_path);
  if (seed) config.seed = *seed;
  if (!out.empty()) config.output_dir = out;
  const auto result = run_experiment(config);
  const auto& s = result.summary;
  std::printf("policy=%s seed=%llu rounds=%zu final_acc=%.4f best_acc=%.4f\n",
              s.policy.c_str(), static_cast<unsigned long long>(s.seed), s.rounds,
              s.final_accuracy, s.best_accuracy);
  std::printf("total_time=%.3f total_energy=%.3f mean_reward=%.6f\n", s.total_time,
              s.total_energy, s.mean_reward);
  if (s.rounds_to_target) {
    std::printf("target %.4f reached at round %zu\n", s.target_accuracy, *s.rounds_to_target);
  } else {
    std::printf("target %.4f not reached\n", s.target_accuracy);
  }
  if (!config.output_dir.empty()) {
    std::printf("wrote %s\n", (config.output_dir / "summary.json").string().c_str());
  }
  return 0;
}

int cmd_pretrain(const std::string& config_path, const std::string& out,
                 const std::string& demos_in, const std::string& demos_out,
                 std::optional<std::uint64_t> seed) {
  auto config = load_config(config_path);
  if (seed) config.seed = *seed;
  const auto demos = demos_in.empty() ? collect_for_config(config) : load_demonstrations(demos_in);
  if (!demos_out.empty()) save_demonstrations(demos_out, demos);
  FedRankAgent agent(config.agent, SeedStreams::from_master(config.seed).agent);
  const auto curve = pretrain_agent(agent, config, demos);
  for (std::size_t e = 0; e < curve.size(); ++e) {
    std::printf("epoch %zu loss %.6f\n", e + 1, curve[e]);
  }
  std::printf("demonstrations=%zu agreement=%.4f\n", demos.size(),
              mean_agreement(agent.net(), demos));
  agent.save(out);
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_compare(const std::vector<std::string>& files, std::optional<double> target,
                bool as_json) {
  if (files.size() < 2) throw InvalidSpec("compare needs a baseline and at least one run");
  std::vector<Summary> summaries;
  for (const auto& f : files) {
    summaries.push_back(load_summary(f));
    if (summaries.back().policy.empty()) summaries.back().policy = f;
  }
  const double t = target.value_or(summaries.front().target_accuracy);
  const auto rows = compare_runs(summaries, t);
  std::cout << (as_json ? comparison_to_json(rows, t) + "\n" : format_comparison(rows, t));
  return 0;
}

int cmd_partition_stats(const std::string& config_path, bool as_json) {
  const auto config = load_config(config_path);
  const Simulation sim(config);
  const auto hist = label_histograms(sim.train_set(), sim.shards());
  std::vector<double> entropy;
  std::vector<std::size_t> sizes;
  for (std::size_t i = 0; i < hist.size(); ++i) {
    entropy.push_back(label_entropy(hist[i]));
    sizes.push_back(sim.shards()[i].data_size());
  }
  const double mean_entropy =
      std::accumulate(entropy.begin(), entropy.end(), 0.0) / static_cast<double>(entropy.size());
  if (as_json) {
    nlohmann::json j;
    j["clients"] = hist.size();
    j["mean_entropy"] = mean_entropy;
    j["sizes"] = sizes;
    j["entropy"] = entropy;
    j["histograms"] = hist;
    std::cout << j.dump(2) << "\n";
    return 0;
  }
  std::printf("clients=%zu rows=%zu classes=%d mean_entropy=%.4f min_size=%zu max_size=%zu\n",
              hist.size(), sim.train_set().size(), sim.train_set().num_classes, mean_entropy,
              *std::min_element(sizes.begin(), sizes.end()),
              *std::max_element(sizes.begin(), sizes.end()));
  std::printf("client,size,entropy,histogram\n");
  for (std::size_t i = 0; i < hist.size(); ++i) {
    std::printf("%zu,%zu,%.4f,", i, sizes[i], entropy[i]);
    for (std::size_t c = 0; c < hist[i].size(); ++c) {
      std::printf(c ? ";%zu" : "%zu", hist[i][c]);
    }
    std::printf("\n");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated client selection simulator"};
  app.require_subcommand(1);

  std::string config_path, out, demos_in, demos_out;
  std::optional<std::uint64_t> seed;
  std::optional<double> target;
  std::vector<std::string> files;
  bool as_json = false;

  auto* run = app.add_subcommand("run", "Run one experiment");
  run->add_option("--config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--seed", seed, "Override the master seed");
  run->add_option("--out", out, "Output directory for rounds.csv and summary.json");

  auto* pre = app.add_subcommand("pretrain", "Imitation-pretrain an agent and save it");
  pre->add_option("--config", config_path, "Experiment config (JSON)")->required();
  pre->add_option("--out", out, "Checkpoint path")->required();
  pre->add_option("--seed", seed, "Override the master seed");
  pre->add_option("--demos-in", demos_in, "Use saved demonstrations instead of collecting");
  pre->add_option("--demos-out", demos_out, "Save the demonstrations used");

  auto* cmp = app.add_subcommand("compare", "Compare runs against the first (baseline) summary");
  cmp->add_option("summaries", files, "summary.json files, baseline first")->required();
  cmp->add_option("--target", target, "Target accuracy (default: the baseline's)");
  cmp->add_flag("--json", as_json, "Emit JSON");

  auto* stats = app.add_subcommand("partition-stats", "Describe the client data partition");
  stats->add_option("--config", config_path, "Experiment config (JSON)")->required();
  stats->add_flag("--json", as_json, "Emit JSON");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return cmd_run(config_path, seed, out);
    if (*pre) return cmd_pretrain(config_path, out, demos_in, demos_out, seed);
    if (*cmp) return cmd_compare(files, target, as_json);
    if (*stats) return cmd_partition_stats(config_path, as_json);
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const InvalidSpec& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return 0;
}
