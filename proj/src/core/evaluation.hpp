#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "core/environment.hpp"
#include "core/learner.hpp"
#include "core/phantom.hpp"

namespace ps {

// One JSON object per line: {step, level, action, theta_x, theta_y, theta_z,
// d, reward, max_q}. reward is null when no target plane was available.
void write_trajectory_jsonl(std::span<const TrajectoryRecord> records,
                            const std::filesystem::path& path);

struct EvalResult {
  double e_d_mm = 0.0;       // mean landmark-to-plane distance
  double e_theta_deg = 0.0;  // angle between detected and true normals
  uint32_t steps = 0;
  double ms_per_step = 0.0;
};

// e_d = mean over landmarks of |n . L + d| for the detected plane;
// e_theta = angle between the detected and ground-truth normals in [0, 90].
EvalResult evaluate_plane(const PlaneParams& detected, const GroundTruth& gt);

struct EvalRow {
  std::string volume;
  std::string variant;
  EvalResult result;
  PlaneParams init_plane;
  PlaneParams detected;
};

struct Aggregate {
  double e_d_mean = 0.0, e_d_std = 0.0;
  double e_theta_mean = 0.0, e_theta_std = 0.0;
  size_t count = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;                    // volume-major, variant-minor
  std::map<std::string, Aggregate> per_variant;
  std::vector<std::string> missing_variants;    // absent checkpoint files
};

// Runs every variant's checkpoint over every test volume from one fixed
// initial plane per volume. The fixed plane is derived from
// (eval_seed, index in path-sorted order), so a reordered manifest produces
// the same report. Trajectories are written as JSONL under
// out_dir/trajectories when out_dir is non-empty.
EvalReport evaluate_suite(
    const std::map<std::string, std::filesystem::path>& variant_checkpoints,
    const std::filesystem::path& manifest_path, uint64_t eval_seed,
    const EpisodeConfig& episode_cfg, const std::filesystem::path& out_dir);

Aggregate aggregate_rows(std::span<const EvalRow> rows);

void write_report_csv(const EvalReport& report,
                      const std::filesystem::path& path);
void write_report_json(const EvalReport& report,
                       const std::filesystem::path& path);

// Published comparison numbers for the three clinical planes. These come
// from experiments on datasets this project cannot ship, so they are context
// for report footnotes only, never acceptance targets.
struct ReferenceEntry {
  const char* plane;
  const char* model;
  double e_d_mean, e_d_std;        // mm
  double e_theta_mean, e_theta_std;  // degrees
};

std::span<const ReferenceEntry> reference_table();

}  // namespace ps
