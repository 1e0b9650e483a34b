#include "core/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "core/learner.hpp"

namespace ps {

namespace {

using nlohmann::json;

json plane_json(const PlaneParams& p) {
  return json{{"theta_x", p.theta_x},
              {"theta_y", p.theta_y},
              {"theta_z", p.theta_z},
              {"d", p.d}};
}

constexpr ReferenceEntry kReferenceTable[] = {
    {"mid-sagittal", "dqn", 1.65, 1.99, 2.42, 5.27},
    {"mid-sagittal", "ddqn", 2.08, 2.58, 3.44, 7.46},
    {"mid-sagittal", "duel-dqn", 1.69, 1.98, 3.82, 7.15},
    {"mid-sagittal", "duel-ddqn", 1.53, 2.20, 2.44, 5.04},
    {"acpc", "dqn", 2.61, 5.44, 3.23, 6.03},
    {"acpc", "ddqn", 1.98, 2.23, 4.48, 14.00},
    {"acpc", "duel-dqn", 2.13, 1.99, 5.24, 13.75},
    {"acpc", "duel-ddqn", 5.30, 11.19, 5.25, 12.64},
    {"4-chamber", "dqn", 5.61, 4.09, 10.16, 10.62},
    {"4-chamber", "ddqn", 5.79, 4.58, 11.20, 14.86},
    {"4-chamber", "duel-dqn", 4.84, 3.03, 8.86, 12.42},
    {"4-chamber", "duel-ddqn", 5.07, 3.33, 8.72, 7.44},
};

}  // namespace

void write_trajectory_jsonl(std::span<const TrajectoryRecord> records,
                            const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out)
    raise(ErrorCode::Io, "cannot write trajectory log: " + path.string());
  for (const auto& r : records) {
    json line{{"step", r.step},         {"level", r.level},
              {"action", r.action},     {"theta_x", r.params.theta_x},
              {"theta_y", r.params.theta_y}, {"theta_z", r.params.theta_z},
              {"d", r.params.d},        {"max_q", r.max_q}};
    line["reward"] = r.reward ? json(*r.reward) : json(nullptr);
    out << line.dump() << "\n";
  }
}

EvalResult evaluate_plane(const PlaneParams& detected, const GroundTruth& gt) {
  if (gt.landmarks.empty())
    raise(ErrorCode::Contract, "evaluation requires at least one landmark");
  EvalResult r;
  double sum = 0.0;
  for (const auto& lm : gt.landmarks) sum += point_plane_distance(detected, lm);
  r.e_d_mm = sum / double(gt.landmarks.size());
  r.e_theta_deg = plane_angle_deg(detected.normal(), gt.plane.normal());
  return r;
}

Aggregate aggregate_rows(std::span<const EvalRow> rows) {
  Aggregate a;
  a.count = rows.size();
  if (rows.empty()) return a;
  for (const auto& r : rows) {
    a.e_d_mean += r.result.e_d_mm;
    a.e_theta_mean += r.result.e_theta_deg;
  }
  a.e_d_mean /= double(rows.size());
  a.e_theta_mean /= double(rows.size());
  if (rows.size() > 1) {
    double vd = 0.0, vt = 0.0;
    for (const auto& r : rows) {
      vd += (r.result.e_d_mm - a.e_d_mean) * (r.result.e_d_mm - a.e_d_mean);
      vt += (r.result.e_theta_deg - a.e_theta_mean) *
            (r.result.e_theta_deg - a.e_theta_mean);
    }
    a.e_d_std = std::sqrt(vd / double(rows.size() - 1));
    a.e_theta_std = std::sqrt(vt / double(rows.size() - 1));
  }
  return a;
}

EvalReport evaluate_suite(
    const std::map<std::string, std::filesystem::path>& variant_checkpoints,
    const std::filesystem::path& manifest_path, uint64_t eval_seed,
    const EpisodeConfig& episode_cfg, const std::filesystem::path& out_dir) {
  episode_cfg.validate();

  auto entries = load_manifest(manifest_path);
  if (entries.empty()) raise(ErrorCode::Config, "evaluation manifest is empty");
  std::sort(entries.begin(), entries.end(),
            [](const DatasetEntry& a, const DatasetEntry& b) {
              return a.volume_path < b.volume_path;
            });

  EvalReport report;

  // Load each present checkpoint once; absent ones are reported, not fatal.
  std::map<std::string, nn::Network> nets;
  for (const auto& [variant, path] : variant_checkpoints) {
    if (!std::filesystem::exists(path)) {
      report.missing_variants.push_back(variant);
      continue;
    }
    nets.emplace(variant, nn::load_checkpoint(path));
  }
  if (!nets.empty()) {
    for (auto it = std::next(nets.begin()); it != nets.end(); ++it)
      if (it->second.arch().input != nets.begin()->second.arch().input)
        raise(ErrorCode::Config,
              "checkpoints disagree on the network input shape; they must "
              "share one episode config");
  }

  const bool log_trajectories = !out_dir.empty();
  if (log_trajectories)
    std::filesystem::create_directories(out_dir / "trajectories");

  for (size_t i = 0; i < entries.size(); ++i) {
    const auto vol = std::make_shared<Volume>(
        normalize_intensities(load_volume(entries[i].volume_path)));
    const GroundTruth gt = load_ground_truth(entries[i].sidecar_path);
    const std::string volume_name = entries[i].volume_path.filename().string();

    // One fixed initial plane per volume, shared by every variant.
    Rng init_rng(derive_stream_seed(eval_seed, "eval:" + std::to_string(i)));
    const PlaneParams init = random_initial_plane(
        *vol, InitMode::UniformRandom, 1.0, init_rng);

    EpisodeConfig cfg = episode_cfg;
    cfg.init_mode = InitMode::FixedPlane;
    cfg.fixed_plane = init;

    for (auto& [variant, net] : nets) {
      Environment env(vol, cfg, std::nullopt);
      Rng unused(0);
      const InferenceResult inf = q_policy_inference(net, env, unused);

      EvalRow row;
      row.volume = volume_name;
      row.variant = variant;
      row.result = evaluate_plane(inf.final_plane, gt);
      row.result.steps = inf.steps;
      row.result.ms_per_step = inf.mean_step_seconds * 1e3;
      row.init_plane = init;
      row.detected = inf.final_plane;
      report.rows.push_back(row);

      if (log_trajectories) {
        const auto stem = entries[i].volume_path.stem().string();
        write_trajectory_jsonl(
            inf.trajectory,
            out_dir / "trajectories" / (stem + "_" + variant + ".jsonl"));
      }
    }
  }

  for (const auto& [variant, net] : nets) {
    std::vector<EvalRow> rows;
    for (const auto& r : report.rows)
      if (r.variant == variant) rows.push_back(r);
    report.per_variant[variant] = aggregate_rows(rows);
  }
  return report;
}

void write_report_csv(const EvalReport& report,
                      const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) raise(ErrorCode::Io, "cannot write report CSV: " + path.string());
  out << "volume,variant,e_d_mm,e_theta_deg,steps,ms_per_step\n";
  char buf[256];
  for (const auto& r : report.rows) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%.6f,%.6f,%u,%.3f\n",
                  r.volume.c_str(), r.variant.c_str(), r.result.e_d_mm,
                  r.result.e_theta_deg, r.result.steps, r.result.ms_per_step);
    out << buf;
  }
}

void write_report_json(const EvalReport& report,
                       const std::filesystem::path& path) {
  json aggregates = json::object();
  for (const auto& [variant, a] : report.per_variant) {
    aggregates[variant] = {
        {"e_d_mm", {{"mean", a.e_d_mean}, {"std", a.e_d_std}}},
        {"e_theta_deg", {{"mean", a.e_theta_mean}, {"std", a.e_theta_std}}},
        {"volumes", a.count}};
  }

  json rows = json::array();
  for (const auto& r : report.rows)
    rows.push_back({{"volume", r.volume},
                    {"variant", r.variant},
                    {"e_d_mm", r.result.e_d_mm},
                    {"e_theta_deg", r.result.e_theta_deg},
                    {"steps", r.result.steps},
                    {"ms_per_step", r.result.ms_per_step},
                    {"init_plane", plane_json(r.init_plane)},
                    {"detected_plane", plane_json(r.detected)}});

  json reference = json::array();
  for (const auto& e : reference_table())
    reference.push_back({{"plane", e.plane},
                         {"model", e.model},
                         {"e_d_mm", {{"mean", e.e_d_mean}, {"std", e.e_d_std}}},
                         {"e_theta_deg",
                          {{"mean", e.e_theta_mean}, {"std", e.e_theta_std}}}});

  json j{{"aggregates", aggregates},
         {"rows", rows},
         {"missing_variants", report.missing_variants},
         {"reference",
          {{"note",
            "Published clinical-MRI results, shown for context only. NOT "
            "REPRODUCIBLE HERE: the clinical datasets are not distributable, "
            "so these numbers are never acceptance targets for this "
            "synthetic-phantom pipeline."},
           {"table", reference}}}};

  std::ofstream out(path, std::ios::trunc);
  if (!out) raise(ErrorCode::Io, "cannot write report JSON: " + path.string());
  out << j.dump(2) << "\n";
}

std::span<const ReferenceEntry> reference_table() {
  return {kReferenceTable, std::size(kReferenceTable)};
}

}  // namespace ps
