// SPDX-License-Identifier: Apache-2.0

#include "maskrdt/commands.hpp"

#include "maskrdt/bench.hpp"
#include "maskrdt/training.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>

namespace maskrdt {

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

double target_return(const RunConfig& rc, const SimConfig& sim) {
  if (!rc.str("target_return").empty()) return rc.real("target_return");
  return sim.r_max * static_cast<double>(sim.episode_len);
}

void check_model_matches(const ModelConfig& model, std::size_t state_dim, std::size_t catalog, const char* what) {
  if (model.state_dim != state_dim || model.catalog != catalog) {
    throw std::invalid_argument(std::string("checkpoint expects state_dim=") + std::to_string(model.state_dim) +
                                ", catalog=" + std::to_string(model.catalog) + " but the " + what + " has " +
                                std::to_string(state_dim) + " and " + std::to_string(catalog));
  }
}

}  // namespace

Policy make_model_policy(const ParamSet& params, const ModelConfig& cfg, double target) {
  return [&params, cfg, target](const PolicyContext& ctx, Rng&) {
    return act(ctx.history, ctx.state, target, params, cfg);
  };
}

std::vector<RankingExample> offline_examples(const Dataset& data, const ParamSet& params, const ModelConfig& cfg) {
  std::vector<RankingExample> out;
  out.reserve(data.total_steps());
  for (const auto& tr : data.trajectories) {
    for (std::size_t t = 0; t < tr.size(); ++t) {
      const auto seg = build_segment(tr, t, cfg.context, std::min(cfg.context, t + 1), cfg.horizon);
      const Tensor logits = forward(seg, params, cfg).logits;
      out.push_back({{logits.data().begin(), logits.data().end()}, tr[t].action});
    }
  }
  return out;
}

int cmd_gen_data(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  const auto sim = rc.sim();
  const auto episodes = rc.count("episodes");
  const auto items = ItemCatalog::generate(sim);
  const auto result =
      rollout(make_oracle_policy(rc.real("eps")), sim, items, episodes, sim.seed, rc.real("gamma"));
  Dataset data;
  data.state_dim = sim.state_dim;
  data.catalog = sim.catalog;
  data.r_max = sim.r_max;
  data.gamma = rc.real("gamma");
  data.trajectories = result.trajectories;
  write_dataset(data, rc.str("data"));
  write_items(items, rc.str("items"));
  if (episodes == 0) {
    err << "warning: --episodes 0 wrote an empty dataset\n";
    out << "oracle CTR: n/a (no episodes)\n";
  } else {
    out << "oracle CTR: " << num(result.mean_ctr) << " +- " << num(result.std_ctr) << " over " << episodes
        << " episodes\n";
  }
  out << "wrote " << rc.str("data") << " and " << rc.str("items") << '\n';
  return kExitOk;
}

int cmd_train(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  const auto data = read_dataset(rc.str("data"));
  if (data.trajectories.empty()) {
    err << "error: dataset '" << rc.str("data") << "' has no trajectories\n";
    return kExitError;
  }
  auto mcfg = rc.model();
  const auto tcfg = rc.train();
  std::unique_ptr<ResumeState> resume;
  if (!rc.str("resume").empty()) {
    const auto ckpt = load_checkpoint(rc.str("resume"));
    mcfg = ckpt.config;
    resume = std::make_unique<ResumeState>(resume_state(ckpt));
    out << "resuming from step " << resume->step << '\n';
  }
  check_model_matches(mcfg, data.state_dim, data.catalog, "dataset");

  std::ofstream metrics(rc.str("metrics"), std::ios::binary | std::ios::trunc);
  if (!metrics) throw std::runtime_error("cannot open '" + rc.str("metrics") + "' for writing");
  write_metrics_header(metrics);
  const auto result = train(data, mcfg, tcfg, resume.get(), [&](const MetricsRow& row) {
    write_metrics_row(metrics, row);
    metrics.flush();
  });
  save_checkpoint(rc.str("checkpoint"), make_checkpoint(result, mcfg, tcfg));
  if (result.diverged) {
    err << "error: training diverged at step " << result.steps_done << "; last good parameters saved to "
        << rc.str("checkpoint") << '\n';
    return kExitDiverged;
  }
  out << "initial loss " << num(result.initial_loss) << ", final loss " << num(result.final_loss) << '\n';
  out << "wrote " << rc.str("checkpoint") << " and " << rc.str("metrics") << '\n';
  return kExitOk;
}

int cmd_eval(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  const auto ckpt = load_checkpoint(rc.str("checkpoint"));
  const auto& mcfg = ckpt.config;
  bool online = rc.flag("online");
  const bool offline = rc.flag("offline");
  if (!online && !offline) online = true;

  std::ofstream report(rc.str("report"), std::ios::binary | std::ios::trunc);
  if (!report) throw std::runtime_error("cannot open '" + rc.str("report") + "' for writing");
  report << "metric,k,value\n";

  if (online) {
    const auto sim = rc.sim();
    const auto items = read_items(rc.str("items"));
    check_model_matches(mcfg, items.dim(), items.size(), "item catalog");
    if (items.dim() != sim.state_dim || items.size() != sim.catalog) {
      throw std::invalid_argument("item catalog does not match the simulator config");
    }
    const auto episodes = rc.count("eval_episodes");
    const auto seed = rc.u64("eval_seed");
    const auto model = rollout(make_model_policy(ckpt.params, mcfg, target_return(rc, sim)), sim, items, episodes, seed);
    const auto random = rollout(make_uniform_policy(), sim, items, episodes, seed);
    report << "ctr_mean,0," << num(model.mean_ctr) << '\n';
    report << "ctr_std,0," << num(model.std_ctr) << '\n';
    report << "random_ctr_mean,0," << num(random.mean_ctr) << '\n';
    out << "online CTR " << num(model.mean_ctr) << " +- " << num(model.std_ctr) << " (uniform random "
        << num(random.mean_ctr) << ") over " << episodes << " episodes\n";
  }
  if (offline) {
    const auto data = read_dataset(rc.str("data"));
    check_model_matches(mcfg, data.state_dim, data.catalog, "dataset");
    if (data.trajectories.empty()) {
      err << "error: dataset '" << rc.str("data") << "' has no trajectories\n";
      return kExitError;
    }
    const auto k = rc.count("k");
    const auto m = topk_metrics(offline_examples(data, ckpt.params, mcfg), k);
    report << "recall," << k << ',' << num(m.recall) << '\n';
    report << "precision," << k << ',' << num(m.precision) << '\n';
    report << "ndcg," << k << ',' << num(m.ndcg) << '\n';
    out << "recall@" << k << " " << num(m.recall) << ", precision@" << k << " " << num(m.precision) << ", ndcg@"
        << k << " " << num(m.ndcg) << '\n';
  }
  out << "wrote " << rc.str("report") << '\n';
  return kExitOk;
}

int cmd_bench(const RunConfig& rc, std::ostream& out, std::ostream&) {
  const auto rows = run_bench(rc.bench());
  std::ofstream csv(rc.str("bench_out"), std::ios::binary | std::ios::trunc);
  if (!csv) throw std::runtime_error("cannot open '" + rc.str("bench_out") + "' for writing");
  write_bench_csv(csv, rows);
  write_bench_csv(out, rows);
  return kExitOk;
}

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"MaskRDT: masked retention decision model for sequential recommendation"};
  app.require_subcommand(1);
  using Handler = int (*)(const RunConfig&, std::ostream&, std::ostream&);
  const std::vector<std::tuple<std::string, std::string, Handler>> commands = {
      {"gen-data", "generate oracle trajectories and the item sidecar", cmd_gen_data},
      {"train", "train a model on a trajectory dataset", cmd_train},
      {"eval", "evaluate a checkpoint online (simulator) or offline (ranking)", cmd_eval},
      {"bench", "time retention modes against softmax attention", cmd_bench},
  };

  std::string config_path;
  std::map<std::string, std::string> string_values;
  std::map<std::string, bool> flag_values;
  std::map<CLI::App*, std::vector<std::pair<std::string, CLI::Option*>>> options;
  for (const auto& [name, help, _] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "key = value file; flags override it");
    for (const auto& key : config_keys()) {
      std::string names = "--" + key.name;
      auto dashed = key.name;
      std::replace(dashed.begin(), dashed.end(), '_', '-');
      if (dashed != key.name) names += ",--" + dashed;
      const std::string desc = key.help + (key.default_value.empty() ? "" : " [" + key.default_value + "]");
      CLI::Option* opt = key.is_flag ? sub->add_flag(names, flag_values[key.name], desc)
                                     : sub->add_option(names, string_values[key.name], desc);
      opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);  // repeated flags: last one wins
      options[sub].emplace_back(key.name, opt);
    }
  }

  std::vector<const char*> argv{"maskrdt"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  for (const auto& [name, _, handler] : commands) {
    auto* sub = app.get_subcommand(name);
    if (!sub->parsed()) continue;
    try {
      RunConfig rc;
      if (!config_path.empty()) rc.load_file(config_path);
      for (const auto& [key, opt] : options[sub]) {
        if (opt->count() == 0) continue;
        if (flag_values.contains(key)) {
          rc.set(key, flag_values[key] ? "true" : "false");
        } else {
          rc.set(key, string_values[key]);
        }
      }
      err << "# " << name << " configuration\n";
      std::ostringstream cfg;
      rc.print(cfg);
      std::istringstream lines(cfg.str());
      for (std::string line; std::getline(lines, line);) err << "#   " << line << '\n';
      return handler(rc, out, err);
    } catch (const std::exception& e) {
      err << "error: " << e.what() << '\n';
      return kExitError;
    }
  }
  return kExitError;
}

}  // namespace maskrdt
