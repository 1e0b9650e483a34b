// planescout command line: phantom-gen | train | infer | eval | inspect.
// Thin shell over the C API: flags are folded into the JSON run config and
// handed to libplanescout.

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "planescout.h"

namespace {

using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

int exit_code_for(ps_status status) {
  switch (status) {
    case PS_OK: return kExitOk;
    case PS_ERR_CONFIG:
    case PS_ERR_CONTRACT: return kExitUsage;
    default: return kExitRuntime;
  }
}

int report_failure(ps_status status) {
  std::cerr << "error (" << ps_status_name(status) << "): " << ps_last_error()
            << "\n";
  return exit_code_for(status);
}

struct GlobalOptions {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::string out_dir = "out";
  std::optional<int> threads;
};

json load_config(const GlobalOptions& g) {
  json cfg = json::object();
  if (!g.config_path.empty()) {
    std::ifstream in(g.config_path);
    if (!in) {
      std::cerr << "error: cannot open config file: " << g.config_path << "\n";
      std::exit(kExitUsage);
    }
    try {
      in >> cfg;
    } catch (const json::exception& e) {
      std::cerr << "error: config is not valid JSON: " << e.what() << "\n";
      std::exit(kExitUsage);
    }
    // A previously echoed resolved config works as a config file.
    if (cfg.is_object() && cfg.contains("config") && cfg.contains("command"))
      cfg = cfg.at("config");
  }
  if (g.seed) cfg["seed"] = *g.seed;
  if (g.threads) {
    cfg["threads"] = *g.threads;
  } else if (const char* env = std::getenv("PLANESCOUT_THREADS")) {
    cfg["threads"] = std::atoi(env);
  }
  return cfg;
}

void add_global_options(CLI::App* cmd, GlobalOptions& g) {
  cmd->add_option("--config", g.config_path, "JSON run config file");
  cmd->add_option("--seed", g.seed, "root random seed (overrides config)");
  cmd->add_option("-o,--out", g.out_dir, "output directory");
  cmd->add_option("--threads", g.threads,
                  "worker threads (0 = hardware; PLANESCOUT_THREADS env is "
                  "the fallback)");
}

bool parse_plane_csv(const std::string& text, json& plane) {
  std::stringstream ss(text);
  std::vector<double> vals;
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      vals.push_back(std::stod(item));
    } catch (...) {
      return false;
    }
  }
  if (vals.size() != 4) return false;
  plane = {{"theta_x", vals[0]},
           {"theta_y", vals[1]},
           {"theta_z", vals[2]},
           {"d", vals[3]}};
  return true;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"planescout: multi-scale DQN view-plane search in 3D volumes"};
  app.require_subcommand(1);
  app.set_version_flag("--version", ps_version());

  // phantom-gen
  GlobalOptions gen_g;
  uint32_t gen_count = 0;
  auto* gen = app.add_subcommand(
      "phantom-gen", "generate synthetic volumes with known target planes");
  add_global_options(gen, gen_g);
  gen->add_option("--count", gen_count, "number of volumes")->required();

  // train
  GlobalOptions train_g;
  std::string train_manifest, train_variant;
  auto* train = app.add_subcommand("train", "train a DQN variant on a dataset");
  add_global_options(train, train_g);
  train->add_option("--manifest", train_manifest, "dataset manifest path")
      ->required();
  train->add_option("--variant", train_variant,
                    "dqn | ddqn | duel-dqn | duel-ddqn (overrides config)");

  // infer
  GlobalOptions infer_g;
  std::string infer_checkpoint, infer_volume, infer_init, infer_plane;
  auto* infer = app.add_subcommand(
      "infer", "greedy multi-scale rollout of a checkpoint over one volume");
  add_global_options(infer, infer_g);
  infer->add_option("--checkpoint", infer_checkpoint, "checkpoint path")
      ->required();
  infer->add_option("--volume", infer_volume, "PVOL volume path")->required();
  infer->add_option("--init", infer_init,
                    "initial plane mode: random | center | fixed");
  infer->add_option("--plane", infer_plane,
                    "fixed initial plane as theta_x,theta_y,theta_z,d");

  // eval
  GlobalOptions eval_g;
  std::string eval_manifest;
  std::vector<std::string> eval_checkpoints;
  auto* eval = app.add_subcommand(
      "eval", "fixed-init comparative evaluation of trained variants");
  add_global_options(eval, eval_g);
  eval->add_option("--manifest", eval_manifest, "test manifest path")
      ->required();
  eval->add_option("--checkpoint", eval_checkpoints,
                   "NAME=PATH checkpoint entry (repeatable)");

  // inspect
  std::string inspect_checkpoint;
  auto* inspect = app.add_subcommand("inspect", "summarize a checkpoint file");
  inspect->add_option("--checkpoint", inspect_checkpoint, "checkpoint path")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  if (gen->parsed()) {
    const json cfg = load_config(gen_g);
    char* manifest = nullptr;
    const ps_status st = ps_phantom_generate(cfg.dump().c_str(), gen_count,
                                             gen_g.out_dir.c_str(), &manifest);
    if (st != PS_OK) return report_failure(st);
    std::cout << manifest << "\n";
    ps_string_free(manifest);
    return kExitOk;
  }

  if (train->parsed()) {
    json cfg = load_config(train_g);
    if (!train_variant.empty()) {
      json v;
      if (train_variant == "dqn") v = {{"double", false}, {"dueling", false}};
      else if (train_variant == "ddqn") v = {{"double", true}, {"dueling", false}};
      else if (train_variant == "duel-dqn") v = {{"double", false}, {"dueling", true}};
      else if (train_variant == "duel-ddqn") v = {{"double", true}, {"dueling", true}};
      else {
        std::cerr << "error: unknown variant \"" << train_variant << "\"\n";
        return kExitUsage;
      }
      cfg["variant"] = v;
    }
    const ps_status st = ps_train_run(cfg.dump().c_str(),
                                      train_manifest.c_str(),
                                      train_g.out_dir.c_str());
    if (st != PS_OK) return report_failure(st);
    std::cout << "checkpoint: " << train_g.out_dir << "/checkpoint.pqn\n"
              << "metrics:    " << train_g.out_dir << "/metrics.jsonl\n";
    return kExitOk;
  }

  if (infer->parsed()) {
    json cfg = load_config(infer_g);
    if (!infer_init.empty()) {
      std::string mode;
      if (infer_init == "random") mode = "uniform";
      else if (infer_init == "center") mode = "center";
      else if (infer_init == "fixed") mode = "fixed";
      else {
        std::cerr << "error: unknown init mode \"" << infer_init << "\"\n";
        return kExitUsage;
      }
      cfg["episode"]["init_mode"] = mode;
    }
    if (!infer_plane.empty()) {
      json plane;
      if (!parse_plane_csv(infer_plane, plane)) {
        std::cerr << "error: --plane expects theta_x,theta_y,theta_z,d\n";
        return kExitUsage;
      }
      cfg["episode"]["fixed_plane"] = plane;
      cfg["episode"]["init_mode"] = "fixed";
    }
    char* result = nullptr;
    const ps_status st =
        ps_infer_run(cfg.dump().c_str(), infer_checkpoint.c_str(),
                     infer_volume.c_str(), infer_g.out_dir.c_str(), &result);
    if (st != PS_OK) return report_failure(st);
    const json summary = json::parse(result);
    ps_string_free(result);
    const auto& plane = summary.at("final_plane");
    std::cout << "final plane: theta=(" << plane.at("theta_x").get<double>()
              << ", " << plane.at("theta_y").get<double>() << ", "
              << plane.at("theta_z").get<double>() << ") d="
              << plane.at("d").get<double>() << "\n"
              << "steps: " << summary.at("steps").get<uint64_t>()
              << "  terminal: " << summary.at("terminal_event").get<std::string>()
              << "\nmean step latency: "
              << summary.at("mean_step_ms").get<double>() << " ms\n";
    return kExitOk;
  }

  if (eval->parsed()) {
    json cfg = load_config(eval_g);
    for (const auto& entry : eval_checkpoints) {
      const auto pos = entry.find('=');
      if (pos == std::string::npos || pos == 0 || pos + 1 >= entry.size()) {
        std::cerr << "error: --checkpoint expects NAME=PATH\n";
        return kExitUsage;
      }
      cfg["eval"]["checkpoints"][entry.substr(0, pos)] = entry.substr(pos + 1);
    }
    const ps_status st = ps_eval_run(cfg.dump().c_str(), eval_manifest.c_str(),
                                     eval_g.out_dir.c_str());
    if (st != PS_OK) return report_failure(st);
    // Absent checkpoints are not fatal, but the operator should hear it.
    std::ifstream report_in(eval_g.out_dir + "/report.json");
    if (report_in) {
      try {
        json report;
        report_in >> report;
        for (const auto& name : report.at("missing_variants"))
          std::cerr << "warning: checkpoint for variant \""
                    << name.get<std::string>() << "\" not found; column absent\n";
      } catch (const json::exception&) {
      }
    }
    std::cout << "report: " << eval_g.out_dir << "/report.csv\n"
              << "        " << eval_g.out_dir << "/report.json\n";
    return kExitOk;
  }

  if (inspect->parsed()) {
    char* summary_text = nullptr;
    const ps_status st =
        ps_checkpoint_inspect(inspect_checkpoint.c_str(), &summary_text);
    if (st != PS_OK) return report_failure(st);
    const json summary = json::parse(summary_text);
    ps_string_free(summary_text);
    std::cout << "architecture: " << summary.at("architecture").dump(2) << "\n"
              << "parameters:   " << summary.at("param_count").get<uint64_t>()
              << "\n"
              << "train steps:  " << summary.at("step_count").get<uint64_t>()
              << "\n";
    return kExitOk;
  }

  return kExitUsage;
}
