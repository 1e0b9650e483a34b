#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "core/geometry.hpp"
#include "core/rng.hpp"
#include "core/volume.hpp"

namespace ps {

// One resampled plane block as seen by the network. Frames are shared between
// the environment state and the replay memory, so keeping a transition alive
// costs pointers, not copies.
struct Frame {
  std::vector<float> values;  // PlaneGrid::values layout
};
using FramePtr = std::shared_ptr<const Frame>;

constexpr int kHistoryLength = 4;

struct EnvState {
  std::array<FramePtr, kHistoryLength> history;  // oldest first
  PlaneParams params;
  uint32_t level = 0;
};

struct ScaleLevel {
  double spacing_mm;
  double angle_step_deg;
  double d_step_mm;
};

// Coarse-to-fine schedule: spacing strictly decreases, the angle step halves
// per level and the offset step decreases by one unit per level.
struct ScaleSchedule {
  std::vector<ScaleLevel> levels;
  void validate() const;
};

// brain: (3mm, 8deg, 4mm) -> (2, 4, 3) -> (1, 2, 2)
// cardiac: (5mm, 8deg, 4mm) -> (4, 4, 3) -> (3, 2, 2) -> (2, 1, 1)
ScaleSchedule brain_schedule();
ScaleSchedule cardiac_schedule();

enum class InitMode : uint8_t {
  UniformRandom = 0,    // random point anywhere in the volume
  CenterRestricted = 1, // random point in the central fraction box
  FixedPlane = 2,       // use EpisodeConfig::fixed_plane verbatim
};

struct EpisodeConfig {
  std::array<uint32_t, 3> grid_size{50, 50, 9};
  ScaleSchedule schedule = brain_schedule();
  uint32_t max_steps_per_level = 200;
  uint32_t oscillation_window = 20;  // >= 4
  InitMode init_mode = InitMode::UniformRandom;
  double center_fraction = 0.2;      // CenterRestricted box size per axis
  PlaneParams fixed_plane{};

  GridSpec grid_at_level(uint32_t level) const;
  void validate() const;
};

struct Transition {
  EnvState s;
  Action a;
  int8_t r;  // in {-1, 0, +1}
  EnvState s_next;
  bool terminal;
};

// sgn(D(prev, target) - D(curr, target)): +1 when the step moved strictly
// closer in parameter distance, -1 strictly farther, 0 on an exact tie.
int compute_reward(const PlaneParams& prev, const PlaneParams& curr,
                   const PlaneParams& target, double d_scale_mm);

// Draws the paper-style initial plane: a random point q in the volume (or in
// the central fraction box), normal from the center toward q, plane through
// q. Redraws when q coincides with the center; fails after 100 tries.
PlaneParams random_initial_plane(const Volume& vol, InitMode mode,
                                 double center_fraction, Rng& rng);

// Revisit detector. The last entry of `recent` is the plane just reached; an
// oscillation is declared when its parameter tuple (quantized to 1e-6 degree
// / 1e-6 mm) already appears among the preceding entries of the trailing
// `window`. Returns the index (into `recent`) of the windowed entry with the
// lowest recorded max-Q, ties resolved to the earliest.
std::optional<size_t> detect_oscillation(std::span<const PlaneParams> recent,
                                         std::span<const double> recent_q,
                                         size_t window);

enum class StepEvent : uint8_t {
  None = 0,
  ScaleAdvance = 1,   // oscillation at a non-final level
  Oscillation = 2,    // terminal: oscillation at the final level
  Budget = 3,         // terminal: per-level step budget exhausted
};

const char* step_event_name(StepEvent e);

struct StepResult {
  int reward = 0;   // 0 when no target plane is configured
  bool terminal = false;
  StepEvent event = StepEvent::None;
};

// Stateful episode over one volume. Single-threaded; run one instance per
// concurrent episode. When a target plane is supplied, rewards are computed
// against it (training); without one the reward is always 0 (inference).
class Environment {
public:
  Environment(std::shared_ptr<const Volume> volume, EpisodeConfig cfg,
              std::optional<PlaneParams> target);

  // Draws the initial plane per the configured init mode, fills the history
  // with the level-0 grid, and returns the initial state.
  const EnvState& reset(Rng& rng);

  // Advances one step. `max_q_current` is the agent's max Q-value for the
  // state it acted from; it is recorded for oscillation resolution.
  StepResult step(Action a, double max_q_current);

  // Re-centers on `plane`, bumps the scale level and refills the history at
  // the new spacing. Contract error at the final level.
  void advance_scale(const PlaneParams& plane);

  const EnvState& state() const { return state_; }
  bool terminal() const { return terminal_; }

  // The episode's output plane: after oscillation/budget termination this is
  // the visited plane with the lowest recorded max-Q.
  const PlaneParams& final_plane() const { return state_.params; }

  const EpisodeConfig& config() const { return cfg_; }
  double d_scale() const { return d_scale_; }
  uint32_t total_steps() const { return total_steps_; }

private:
  FramePtr resample(const PlaneParams& p) const;
  void fill_history(const FramePtr& frame);
  PlaneParams draw_initial_plane(Rng& rng) const;

  std::shared_ptr<const Volume> volume_;
  EpisodeConfig cfg_;
  std::optional<PlaneParams> target_;
  double d_scale_;

  EnvState state_;
  bool started_ = false;
  bool terminal_ = false;
  uint32_t steps_this_level_ = 0;
  uint32_t total_steps_ = 0;
  std::vector<PlaneParams> visited_;  // visited planes at the current level
  std::vector<double> visited_q_;     // their recorded max-Q values
};

}  // namespace ps
