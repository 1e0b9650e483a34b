#include "planescout.h"

#include <cstring>
#include <fstream>
#include <string>

#include <json.hpp>

#include "core/config.hpp"
#include "core/evaluation.hpp"
#include "core/learner.hpp"
#include "core/threads.hpp"
#include "core/volume.hpp"

namespace {

using nlohmann::json;

thread_local std::string g_last_error;

ps_status code_of(const ps::Error& e) {
  switch (e.code()) {
    case ps::ErrorCode::Io: return PS_ERR_IO;
    case ps::ErrorCode::Format: return PS_ERR_FORMAT;
    case ps::ErrorCode::Config: return PS_ERR_CONFIG;
    case ps::ErrorCode::Contract: return PS_ERR_CONTRACT;
    case ps::ErrorCode::Numeric: return PS_ERR_NUMERIC;
    case ps::ErrorCode::DegenerateNormal: return PS_ERR_DEGENERATE;
  }
  return PS_ERR_UNKNOWN;
}

template <class Fn>
ps_status guarded(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return PS_OK;
  } catch (const ps::Error& e) {
    g_last_error = e.what();
    return code_of(e);
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return PS_ERR_UNKNOWN;
  } catch (...) {
    g_last_error = "unknown failure";
    return PS_ERR_UNKNOWN;
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out) std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

const char* require(const char* ptr, const char* what) {
  if (!ptr) ps::raise(ps::ErrorCode::Contract,
                      std::string(what) + " must not be null");
  return ptr;
}

ps::RunConfig parse_config(const char* config_json) {
  const ps::RunConfig cfg =
      ps::RunConfig::from_json_text(require(config_json, "config_json"));
  if (cfg.threads != 0) ps::set_thread_count(cfg.threads);
  return cfg;
}

json plane_json(const ps::PlaneParams& p) {
  return json{{"theta_x", p.theta_x},
              {"theta_y", p.theta_y},
              {"theta_z", p.theta_z},
              {"d", p.d}};
}

}  // namespace

struct ps_volume {
  ps::Volume v;
};

extern "C" {

const char* ps_version(void) { return "1.0.0"; }

const char* ps_status_name(ps_status status) {
  switch (status) {
    case PS_OK: return "ok";
    case PS_ERR_IO: return "io_error";
    case PS_ERR_FORMAT: return "format_error";
    case PS_ERR_CONFIG: return "config_error";
    case PS_ERR_CONTRACT: return "contract_error";
    case PS_ERR_NUMERIC: return "numeric_error";
    case PS_ERR_DEGENERATE: return "degenerate_normal";
    case PS_ERR_UNKNOWN: break;
  }
  return "unknown_error";
}

const char* ps_last_error(void) { return g_last_error.c_str(); }

void ps_set_threads(int n) { ps::set_thread_count(n); }

void ps_string_free(char* s) { std::free(s); }

ps_status ps_volume_load(const char* path, ps_volume** out) {
  return guarded([&] {
    require(path, "path");
    require(reinterpret_cast<const char*>(out), "out");
    auto handle = std::make_unique<ps_volume>();
    handle->v = ps::load_volume(path);
    *out = handle.release();
  });
}

ps_status ps_volume_create(const uint32_t dims[3], const double spacing_mm[3],
                           const double origin_mm[3], const float* voxels,
                           ps_volume** out) {
  return guarded([&] {
    if (!dims || !spacing_mm || !origin_mm || !voxels || !out)
      ps::raise(ps::ErrorCode::Contract, "ps_volume_create: null argument");
    auto handle = std::make_unique<ps_volume>();
    handle->v.dims = {dims[0], dims[1], dims[2]};
    handle->v.spacing = {spacing_mm[0], spacing_mm[1], spacing_mm[2]};
    handle->v.origin = {origin_mm[0], origin_mm[1], origin_mm[2]};
    handle->v.voxels.assign(voxels, voxels + handle->v.voxel_count());
    handle->v.validate();
    *out = handle.release();
  });
}

ps_status ps_volume_save(const ps_volume* volume, const char* path) {
  return guarded([&] {
    if (!volume) ps::raise(ps::ErrorCode::Contract, "null volume handle");
    ps::save_volume(volume->v, require(path, "path"));
  });
}

ps_status ps_volume_dims(const ps_volume* volume, uint32_t out[3]) {
  return guarded([&] {
    if (!volume || !out)
      ps::raise(ps::ErrorCode::Contract, "null argument to ps_volume_dims");
    for (int i = 0; i < 3; ++i) out[i] = volume->v.dims[i];
  });
}

ps_status ps_volume_spacing(const ps_volume* volume, double out[3]) {
  return guarded([&] {
    if (!volume || !out)
      ps::raise(ps::ErrorCode::Contract, "null argument to ps_volume_spacing");
    for (int i = 0; i < 3; ++i) out[i] = volume->v.spacing[i];
  });
}

ps_status ps_volume_origin(const ps_volume* volume, double out[3]) {
  return guarded([&] {
    if (!volume || !out)
      ps::raise(ps::ErrorCode::Contract, "null argument to ps_volume_origin");
    for (int i = 0; i < 3; ++i) out[i] = volume->v.origin[i];
  });
}

ps_status ps_volume_sample(const ps_volume* volume, double x, double y,
                           double z, double* out) {
  return guarded([&] {
    if (!volume || !out)
      ps::raise(ps::ErrorCode::Contract, "null argument to ps_volume_sample");
    *out = ps::sample_trilinear(volume->v, {x, y, z});
  });
}

void ps_volume_free(ps_volume* volume) { delete volume; }

ps_status ps_phantom_generate(const char* config_json, uint32_t count,
                              const char* out_dir, char** manifest_path_out) {
  return guarded([&] {
    const auto cfg = parse_config(config_json);
    const std::filesystem::path dir = require(out_dir, "out_dir");
    const auto manifest = ps::generate_dataset(cfg.phantom, count, dir);
    ps::echo_resolved_config(cfg, "phantom-gen",
                             {{"count", std::to_string(count)},
                              {"out", dir.string()}},
                             dir);
    if (manifest_path_out) *manifest_path_out = dup_string(manifest.string());
  });
}

ps_status ps_train_run(const char* config_json, const char* manifest_path,
                       const char* out_dir) {
  return guarded([&] {
    const auto cfg = parse_config(config_json);
    const std::filesystem::path manifest = require(manifest_path, "manifest");
    const std::filesystem::path dir = require(out_dir, "out_dir");
    ps::echo_resolved_config(cfg, "train",
                             {{"manifest", manifest.string()},
                              {"out", dir.string()}},
                             dir);
    const auto dataset = ps::load_dataset(manifest);
    ps::train(dataset, cfg.train, cfg.variant, cfg.episode_config(),
              cfg.architecture, dir);
  });
}

ps_status ps_infer_run(const char* config_json, const char* checkpoint_path,
                       const char* volume_path, const char* out_dir,
                       char** result_json_out) {
  return guarded([&] {
    const auto cfg = parse_config(config_json);
    const std::filesystem::path checkpoint = require(checkpoint_path,
                                                     "checkpoint");
    const std::filesystem::path vol_path = require(volume_path, "volume");
    const std::filesystem::path dir = require(out_dir, "out_dir");
    ps::echo_resolved_config(cfg, "infer",
                             {{"checkpoint", checkpoint.string()},
                              {"volume", vol_path.string()},
                              {"out", dir.string()}},
                             dir);

    const auto net = ps::nn::load_checkpoint(checkpoint);
    auto volume = std::make_shared<ps::Volume>(
        ps::normalize_intensities(ps::load_volume(vol_path)));
    ps::Environment env(volume, cfg.episode_config(), std::nullopt);
    ps::Rng rng(ps::derive_stream_seed(cfg.seed, "infer.init"));
    const auto result = ps::q_policy_inference(net, env, rng);

    ps::write_trajectory_jsonl(result.trajectory, dir / "trajectory.jsonl");

    json summary{{"final_plane", plane_json(result.final_plane)},
                 {"steps", result.steps},
                 {"terminal_event", ps::step_event_name(result.terminal_event)},
                 {"mean_step_ms", result.mean_step_seconds * 1e3}};
    std::ofstream final_out(dir / "final_plane.json", std::ios::trunc);
    if (!final_out)
      ps::raise(ps::ErrorCode::Io, "cannot write final_plane.json");
    final_out << summary.dump(2) << "\n";

    if (result_json_out) *result_json_out = dup_string(summary.dump());
  });
}

ps_status ps_eval_run(const char* config_json, const char* manifest_path,
                      const char* out_dir) {
  return guarded([&] {
    const auto cfg = parse_config(config_json);
    const std::filesystem::path manifest = require(manifest_path, "manifest");
    const std::filesystem::path dir = require(out_dir, "out_dir");
    if (cfg.eval_checkpoints.empty())
      ps::raise(ps::ErrorCode::Config,
                "eval requires checkpoints under eval.checkpoints");
    ps::echo_resolved_config(cfg, "eval",
                             {{"manifest", manifest.string()},
                              {"out", dir.string()}},
                             dir);
    const auto report = ps::evaluate_suite(cfg.eval_checkpoints, manifest,
                                           cfg.seed, cfg.episode_config(), dir);
    ps::write_report_csv(report, dir / "report.csv");
    ps::write_report_json(report, dir / "report.json");
  });
}

ps_status ps_checkpoint_inspect(const char* checkpoint_path,
                                char** summary_json_out) {
  return guarded([&] {
    const auto net =
        ps::nn::load_checkpoint(require(checkpoint_path, "checkpoint"));
    json tensors = json::array();
    for (const auto& p : net.params()) tensors.push_back(p.shape);
    json summary{{"architecture", json::parse(net.arch().to_json_string())},
                 {"param_count", net.param_count()},
                 {"step_count", net.step_count()},
                 {"tensor_shapes", tensors}};
    if (summary_json_out) *summary_json_out = dup_string(summary.dump());
  });
}

}  // extern "C"
