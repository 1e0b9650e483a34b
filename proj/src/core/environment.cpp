#include "core/environment.hpp"

#include <algorithm>
#include <cmath>

namespace ps {

namespace {

// Parameter tuples are compared after quantization so that float drift from
// exact revisits does not defeat the detector.
struct QuantizedParams {
  int64_t tx, ty, tz, d;
  bool operator==(const QuantizedParams&) const = default;
};

QuantizedParams quantize(const PlaneParams& p) {
  auto q = [](double v) { return int64_t(std::llround(v * 1e6)); };
  return {q(p.theta_x), q(p.theta_y), q(p.theta_z), q(p.d)};
}

}  // namespace

void ScaleSchedule::validate() const {
  if (levels.empty())
    raise(ErrorCode::Config, "scale schedule must have at least one level");
  for (size_t i = 0; i < levels.size(); ++i) {
    const auto& l = levels[i];
    if (!(l.spacing_mm > 0.0) || !(l.angle_step_deg > 0.0) ||
        !(l.d_step_mm > 0.0))
      raise(ErrorCode::Config, "scale schedule entries must be positive");
    if (i > 0) {
      const auto& prev = levels[i - 1];
      if (!(l.spacing_mm < prev.spacing_mm))
        raise(ErrorCode::Config, "scale spacing must strictly decrease");
      if (std::abs(l.angle_step_deg - 0.5 * prev.angle_step_deg) > 1e-9)
        raise(ErrorCode::Config, "angle step must halve at each level");
      if (std::abs(l.d_step_mm - (prev.d_step_mm - 1.0)) > 1e-9)
        raise(ErrorCode::Config, "offset step must decrease by 1 per level");
    }
  }
}

ScaleSchedule brain_schedule() {
  return {{{3.0, 8.0, 4.0}, {2.0, 4.0, 3.0}, {1.0, 2.0, 2.0}}};
}

ScaleSchedule cardiac_schedule() {
  return {{{5.0, 8.0, 4.0}, {4.0, 4.0, 3.0}, {3.0, 2.0, 2.0}, {2.0, 1.0, 1.0}}};
}

GridSpec EpisodeConfig::grid_at_level(uint32_t level) const {
  if (level >= schedule.levels.size())
    raise(ErrorCode::Contract, "scale level out of range");
  const double s = schedule.levels[level].spacing_mm;
  return GridSpec{grid_size, {s, s, s}};
}

void EpisodeConfig::validate() const {
  schedule.validate();
  grid_at_level(0).validate();
  if (max_steps_per_level < 1)
    raise(ErrorCode::Config, "max steps per level must be >= 1");
  if (oscillation_window < 4)
    raise(ErrorCode::Config, "oscillation window must be >= 4");
  if (init_mode == InitMode::CenterRestricted &&
      (center_fraction <= 0.0 || center_fraction > 1.0))
    raise(ErrorCode::Config, "center fraction must be in (0, 1]");
}

int compute_reward(const PlaneParams& prev, const PlaneParams& curr,
                   const PlaneParams& target, double d_scale_mm) {
  const double before = param_distance(prev, target, d_scale_mm);
  const double after = param_distance(curr, target, d_scale_mm);
  if (after < before) return 1;
  if (after > before) return -1;
  return 0;
}

std::optional<size_t> detect_oscillation(std::span<const PlaneParams> recent,
                                         std::span<const double> recent_q,
                                         size_t window) {
  if (recent.size() != recent_q.size())
    raise(ErrorCode::Contract, "oscillation lists must be aligned");
  if (window < 4)
    raise(ErrorCode::Contract, "oscillation window must be >= 4");
  if (recent.size() < 2) return std::nullopt;

  const size_t n = recent.size();
  const size_t begin = n > window ? n - window : 0;
  const QuantizedParams current = quantize(recent[n - 1]);

  bool revisit = false;
  for (size_t i = begin; i + 1 < n; ++i) {
    if (quantize(recent[i]) == current) {
      revisit = true;
      break;
    }
  }
  if (!revisit) return std::nullopt;

  size_t best = begin;
  for (size_t i = begin + 1; i < n; ++i)
    if (recent_q[i] < recent_q[best]) best = i;
  return best;
}

const char* step_event_name(StepEvent e) {
  switch (e) {
    case StepEvent::None: return "none";
    case StepEvent::ScaleAdvance: return "scale_advance";
    case StepEvent::Oscillation: return "oscillation";
    case StepEvent::Budget: return "budget";
  }
  return "?";
}

Environment::Environment(std::shared_ptr<const Volume> volume,
                         EpisodeConfig cfg, std::optional<PlaneParams> target)
    : volume_(std::move(volume)), cfg_(std::move(cfg)),
      target_(std::move(target)) {
  if (!volume_) raise(ErrorCode::Contract, "environment requires a volume");
  cfg_.validate();
  d_scale_ = default_d_scale(*volume_);
}

FramePtr Environment::resample(const PlaneParams& p) const {
  auto grid = sample_plane_grid(*volume_, p, cfg_.grid_at_level(state_.level));
  auto frame = std::make_shared<Frame>();
  frame->values = std::move(grid.values);
  return frame;
}

void Environment::fill_history(const FramePtr& frame) {
  for (auto& slot : state_.history) slot = frame;
}

PlaneParams random_initial_plane(const Volume& vol, InitMode mode,
                                 double center_fraction, Rng& rng) {
  if (mode == InitMode::FixedPlane)
    raise(ErrorCode::Contract, "random_initial_plane needs a random init mode");
  const WorldPoint c = vol.center();
  const Vec3 ext = vol.extent();
  const double fraction =
      mode == InitMode::CenterRestricted ? center_fraction : 1.0;

  for (int attempt = 0; attempt < 100; ++attempt) {
    WorldPoint q{c.x + ext.x * fraction * (rng.next_double() - 0.5),
                 c.y + ext.y * fraction * (rng.next_double() - 0.5),
                 c.z + ext.z * fraction * (rng.next_double() - 0.5)};
    const Vec3 delta = q - c;
    if (delta.norm() < 1e-9) continue;  // q coincides with the center: redraw
    const Vec3 n = delta.normalized();
    const auto angles = angles_from_normal(n);
    return PlaneParams{angles[0], angles[1], angles[2], -n.dot(q)};
  }
  raise(ErrorCode::Contract,
        "initial plane draw failed 100 times (degenerate volume?)");
}

PlaneParams Environment::draw_initial_plane(Rng& rng) const {
  if (cfg_.init_mode == InitMode::FixedPlane) return cfg_.fixed_plane;
  return random_initial_plane(*volume_, cfg_.init_mode, cfg_.center_fraction,
                              rng);
}

const EnvState& Environment::reset(Rng& rng) {
  state_.level = 0;
  state_.params = draw_initial_plane(rng);
  fill_history(resample(state_.params));
  started_ = true;
  terminal_ = false;
  steps_this_level_ = 0;
  total_steps_ = 0;
  visited_.clear();
  visited_q_.clear();
  return state_;
}

void Environment::advance_scale(const PlaneParams& plane) {
  if (state_.level + 1 >= cfg_.schedule.levels.size())
    raise(ErrorCode::Contract, "advance_scale called at the final level");
  state_.params = plane;
  state_.level += 1;
  fill_history(resample(state_.params));
  steps_this_level_ = 0;
  visited_.clear();
  visited_q_.clear();
}

StepResult Environment::step(Action a, double max_q_current) {
  if (!started_) raise(ErrorCode::Contract, "step before reset");
  if (terminal_) raise(ErrorCode::Contract, "step on a terminal episode");

  // The plane acted from, with the Q-value the agent saw there.
  visited_.push_back(state_.params);
  visited_q_.push_back(max_q_current);

  const auto& level = cfg_.schedule.levels[state_.level];
  const ActionStep step_size{level.angle_step_deg, level.d_step_mm};
  const PlaneParams prev = state_.params;
  state_.params = apply_action(prev, a, step_size);

  StepResult result;
  if (target_)
    result.reward = compute_reward(prev, state_.params, *target_, d_scale_);

  std::rotate(state_.history.begin(), state_.history.begin() + 1,
              state_.history.end());
  state_.history.back() = resample(state_.params);

  steps_this_level_ += 1;
  total_steps_ += 1;

  // Oscillation: the plane just reached was already visited recently. The
  // level's output is the windowed visit with the lowest recorded max-Q; a
  // true revisit carries its earlier record's Q.
  const QuantizedParams current = quantize(state_.params);
  const size_t window = cfg_.oscillation_window;
  // Window over the visit list with the just-reached plane appended.
  const size_t appended = visited_.size() + 1;
  const size_t begin = appended > window ? appended - window : 0;
  std::optional<double> revisit_q;
  for (size_t i = begin; i < visited_.size(); ++i) {
    if (quantize(visited_[i]) == current) {
      revisit_q = visited_q_[i];
      break;
    }
  }
  if (revisit_q) {
    std::vector<PlaneParams> recent(visited_.begin(), visited_.end());
    std::vector<double> recent_q(visited_q_.begin(), visited_q_.end());
    recent.push_back(state_.params);
    recent_q.push_back(*revisit_q);
    const auto best = detect_oscillation(recent, recent_q, window);
    const PlaneParams best_plane = recent[*best];
    if (state_.level + 1 < cfg_.schedule.levels.size()) {
      advance_scale(best_plane);
      result.event = StepEvent::ScaleAdvance;
      return result;
    }
    state_.params = best_plane;
    state_.history.back() = resample(state_.params);
    terminal_ = true;
    result.terminal = true;
    result.event = StepEvent::Oscillation;
    return result;
  }

  if (steps_this_level_ >= cfg_.max_steps_per_level) {
    // Budget exhausted: resolve to the lowest-Q visited plane of this level,
    // earliest on ties.
    size_t best = 0;
    for (size_t i = 1; i < visited_.size(); ++i)
      if (visited_q_[i] < visited_q_[best]) best = i;
    state_.params = visited_[best];
    state_.history.back() = resample(state_.params);
    terminal_ = true;
    result.terminal = true;
    result.event = StepEvent::Budget;
    return result;
  }

  return result;
}

}  // namespace ps
