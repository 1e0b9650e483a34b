#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "core/environment.hpp"
#include "core/learner.hpp"
#include "core/nn.hpp"
#include "core/phantom.hpp"

namespace ps {

// The structured run configuration behind every CLI command. Parsed from
// UTF-8 JSON; unknown keys are rejected, every field has a default, and the
// resolved form (all defaults and presets applied) is what gets echoed next
// to a command's outputs.
struct RunConfig {
  uint64_t seed = 1;
  int threads = 0;  // 0: hardware default

  PhantomConfig phantom;

  std::array<uint32_t, 3> grid_size{50, 50, 9};
  std::string schedule_preset = "brain";  // brain | cardiac | custom
  ScaleSchedule custom_schedule;          // used when preset == custom

  uint32_t max_steps_per_level = 200;
  uint32_t oscillation_window = 20;
  std::string init_mode = "uniform";  // uniform | center | fixed
  double center_fraction = 0.2;
  PlaneParams fixed_plane{};

  std::string train_preset = "default";  // default | desk
  TrainConfig train;
  VariantConfig variant;

  std::optional<nn::Architecture> architecture;

  std::map<std::string, std::filesystem::path> eval_checkpoints;

  static RunConfig from_json_text(const std::string& text);
  static RunConfig from_file(const std::filesystem::path& path);

  // The fully resolved configuration (presets applied, defaults filled).
  std::string to_json_text() const;

  ScaleSchedule schedule() const;
  EpisodeConfig episode_config() const;
  void validate() const;
};

// Desk-scale training profile: the same algorithm at sizes a CPU-bound test
// run can afford. Applied when train.preset == "desk" before explicit keys.
TrainConfig desk_train_config();

// Writes {"command": ..., "args": ..., "config": resolved} next to a
// command's outputs. from_json_text accepts this wrapper as a config file, so
// reruns can point --config at the echo directly.
void echo_resolved_config(const RunConfig& cfg, const std::string& command,
                          const std::map<std::string, std::string>& args,
                          const std::filesystem::path& out_dir);

}  // namespace ps
