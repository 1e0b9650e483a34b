#include "core/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "core/rng.hpp"

namespace ps {

namespace {

using nlohmann::json;

// Hash-based lattice value noise on integer cells, in [-1, 1].
double lattice_noise(int64_t qx, int64_t qy, int64_t qz, uint64_t seed) {
  uint64_t h = seed;
  auto mix = [&h](uint64_t v) {
    h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    h *= 0xff51afd7ed558ccdull;
    h ^= h >> 33;
  };
  mix(static_cast<uint64_t>(qx));
  mix(static_cast<uint64_t>(qy));
  mix(static_cast<uint64_t>(qz));
  return double(h >> 11) * 0x1.0p-52 - 1.0;
}

// Trilinearly interpolated value noise over a lattice of the given cell size.
double value_noise(double x, double y, double z, double cell, uint64_t seed) {
  const double u = x / cell, v = y / cell, w = z / cell;
  const double fu = std::floor(u), fv = std::floor(v), fw = std::floor(w);
  const auto qx = int64_t(fu), qy = int64_t(fv), qz = int64_t(fw);
  const double tx = u - fu, ty = v - fv, tz = w - fw;
  double acc = 0.0;
  for (int dz = 0; dz < 2; ++dz)
    for (int dy = 0; dy < 2; ++dy)
      for (int dx = 0; dx < 2; ++dx) {
        const double wgt = (dx ? tx : 1 - tx) * (dy ? ty : 1 - ty) *
                           (dz ? tz : 1 - tz);
        acc += wgt * lattice_noise(qx + dx, qy + dy, qz + dz, seed);
      }
  return acc;
}

double smooth_edge(double t) {  // 1 -> 0 over t in [0, 1], C1
  if (t <= 0.0) return 1.0;
  if (t >= 1.0) return 0.0;
  return 0.5 * (1.0 + std::cos(t * kPi));
}

json plane_to_json(const PlaneParams& p) {
  return json{{"theta_x", p.theta_x},
              {"theta_y", p.theta_y},
              {"theta_z", p.theta_z},
              {"d", p.d}};
}

PlaneParams plane_from_json(const json& j) {
  PlaneParams p;
  p.theta_x = j.at("theta_x").get<double>();
  p.theta_y = j.at("theta_y").get<double>();
  p.theta_z = j.at("theta_z").get<double>();
  p.d = j.at("d").get<double>();
  return p;
}

}  // namespace

void PhantomConfig::validate() const {
  for (int axis = 0; axis < 3; ++axis) {
    if (dims[axis] < 2)
      raise(ErrorCode::Config, "phantom dims must be >= 2 per axis");
    if (!(spacing[axis] > 0.0))
      raise(ErrorCode::Config, "phantom spacing must be positive");
  }
  if (max_tilt_deg < 0.0 || max_tilt_deg > 45.0)
    raise(ErrorCode::Config, "phantom max tilt must be in [0, 45] degrees");
  if (max_offset_mm < 0.0)
    raise(ErrorCode::Config, "phantom max offset must be nonnegative");
  if (noise_amp < 0.0)
    raise(ErrorCode::Config, "phantom noise amplitude must be nonnegative");
  const double max_spacing = std::max({spacing[0], spacing[1], spacing[2]});
  if (slab_thickness_mm < 2.0 * max_spacing)
    raise(ErrorCode::Config,
          "phantom slab thickness must be at least twice the voxel spacing");
}

std::pair<Volume, GroundTruth> generate_phantom(const PhantomConfig& cfg) {
  cfg.validate();
  Rng rng(derive_stream_seed(cfg.seed, "phantom"));

  Volume vol;
  vol.dims = cfg.dims;
  vol.spacing = cfg.spacing;
  // World origin at the volume center: the plane offset d is then measured
  // from the middle of the scene, so angle actions pivot the plane about the
  // field of view instead of sweeping it sideways.
  vol.origin = {-0.5 * (cfg.dims[0] - 1) * cfg.spacing[0],
                -0.5 * (cfg.dims[1] - 1) * cfg.spacing[1],
                -0.5 * (cfg.dims[2] - 1) * cfg.spacing[2]};
  vol.voxels.resize(vol.voxel_count());
  const WorldPoint c = vol.center();

  // Target normal uniform in the tilt cone around +z, offset uniform around
  // the volume center along the normal.
  const double cos_cone = std::cos(deg_to_rad(cfg.max_tilt_deg));
  const double cos_phi = 1.0 - rng.next_double() * (1.0 - cos_cone);
  const double sin_phi = std::sqrt(std::max(0.0, 1.0 - cos_phi * cos_phi));
  const double psi = rng.uniform(0.0, 2.0 * kPi);
  const Vec3 n{sin_phi * std::cos(psi), sin_phi * std::sin(psi), cos_phi};
  const double offset = cfg.max_offset_mm > 0.0
                            ? rng.uniform(-cfg.max_offset_mm, cfg.max_offset_mm)
                            : 0.0;

  GroundTruth gt;
  const auto angles = angles_from_normal(n);
  gt.plane = {angles[0], angles[1], angles[2], -(n.dot(c) + offset)};

  // Texture parameters for this instance.
  const double wavelength_u = rng.uniform(14.0, 26.0);
  const double wavelength_v = rng.uniform(14.0, 26.0);
  const double wavelength_s = rng.uniform(10.0, 18.0);
  const double phase_u = rng.uniform(0.0, 2.0 * kPi);
  const double phase_v = rng.uniform(0.0, 2.0 * kPi);
  const double phase_s = rng.uniform(0.0, 2.0 * kPi);
  const uint64_t noise_seed = rng.next_u64();

  Vec3 u, v;
  plane_basis(n, u, v);
  const WorldPoint plane_ref = c - (n.dot(c) + gt.plane.d) * n;

  const double half_thickness = 0.5 * cfg.slab_thickness_mm;
  const double edge_ramp = std::max({cfg.spacing[0], cfg.spacing[1],
                                     cfg.spacing[2]});
  const double noise_cell = 3.0 * edge_ramp;

  size_t idx = 0;
  for (uint32_t iz = 0; iz < cfg.dims[2]; ++iz)
    for (uint32_t iy = 0; iy < cfg.dims[1]; ++iy)
      for (uint32_t ix = 0; ix < cfg.dims[0]; ++ix) {
        const WorldPoint w = vol.voxel_center(ix, iy, iz);
        const double s = n.dot(w) + gt.plane.d;  // signed plane distance
        const Vec3 rel = w - plane_ref;
        const double pu = u.dot(rel);
        const double pv = v.dot(rel);

        double background =
            0.25 +
            0.15 * std::cos(2.0 * kPi * pu / wavelength_u + phase_u) *
                std::cos(2.0 * kPi * pv / wavelength_v + phase_v) +
            0.10 * std::cos(2.0 * kPi * std::abs(s) / wavelength_s + phase_s);

        const double slab_w =
            smooth_edge((std::abs(s) - half_thickness) / edge_ramp);
        double value = background + (1.0 - background) * slab_w;

        if (cfg.noise_amp > 0.0) {
          const double sn = cfg.mirror_noise ? std::abs(s) : s;
          value += cfg.noise_amp * value_noise(sn, pu, pv, noise_cell,
                                               noise_seed);
        }
        vol.voxels[idx++] = static_cast<float>(value);
      }

  // On-plane landmarks at fixed in-plane offsets from the plane origin.
  const Vec3 ext = vol.extent();
  const double r = 0.25 * std::min({ext.x, ext.y, ext.z});
  gt.landmarks = {plane_ref, plane_ref + r * u, plane_ref + r * v};
  for (const auto& lm : gt.landmarks)
    if (!vol.contains(lm))
      raise(ErrorCode::Config,
            "phantom config places the target plane outside the volume");
  return {std::move(vol), std::move(gt)};
}

std::filesystem::path generate_dataset(const PhantomConfig& cfg, uint32_t count,
                                       const std::filesystem::path& out_dir) {
  if (count < 1)
    raise(ErrorCode::Config, "dataset count must be >= 1");
  std::filesystem::create_directories(out_dir);

  json manifest = json::array();
  for (uint32_t i = 0; i < count; ++i) {
    PhantomConfig entry_cfg = cfg;
    entry_cfg.seed = cfg.seed + i;
    auto [vol, gt] = generate_phantom(entry_cfg);

    char stem[32];
    std::snprintf(stem, sizeof(stem), "phantom_%04u", i);
    const auto vol_name = std::string(stem) + ".pvol";
    const auto sidecar_name = std::string(stem) + ".json";
    save_volume(vol, out_dir / vol_name);

    json sidecar{{"plane", plane_to_json(gt.plane)},
                 {"landmarks", json::array()},
                 {"seed", entry_cfg.seed}};
    for (const auto& lm : gt.landmarks)
      sidecar["landmarks"].push_back({lm.x, lm.y, lm.z});
    std::ofstream side_out(out_dir / sidecar_name, std::ios::trunc);
    if (!side_out)
      raise(ErrorCode::Io, "cannot write sidecar: " + sidecar_name);
    side_out << sidecar.dump(2) << "\n";

    manifest.push_back(
        {{"volume_path", vol_name}, {"sidecar_path", sidecar_name}});
  }

  const auto manifest_path = out_dir / "manifest.json";
  std::ofstream out(manifest_path, std::ios::trunc);
  if (!out)
    raise(ErrorCode::Io, "cannot write manifest: " + manifest_path.string());
  out << manifest.dump(2) << "\n";
  return manifest_path;
}

GroundTruth load_ground_truth(const std::filesystem::path& sidecar_path) {
  std::ifstream in(sidecar_path);
  if (!in)
    raise(ErrorCode::Io, "cannot open sidecar: " + sidecar_path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    raise(ErrorCode::Format,
          "malformed sidecar " + sidecar_path.string() + ": " + e.what());
  }
  GroundTruth gt;
  try {
    gt.plane = plane_from_json(j.at("plane"));
    for (const auto& lm : j.at("landmarks"))
      gt.landmarks.push_back(
          {lm.at(0).get<double>(), lm.at(1).get<double>(), lm.at(2).get<double>()});
  } catch (const json::exception& e) {
    raise(ErrorCode::Format,
          "sidecar missing fields " + sidecar_path.string() + ": " + e.what());
  }
  return gt;
}

std::vector<DatasetEntry> load_manifest(const std::filesystem::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in)
    raise(ErrorCode::Io, "cannot open manifest: " + manifest_path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    raise(ErrorCode::Format,
          "malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  if (!j.is_array())
    raise(ErrorCode::Format, "manifest must be a JSON array");
  const auto base = manifest_path.parent_path();
  std::vector<DatasetEntry> entries;
  for (const auto& e : j) {
    DatasetEntry entry;
    entry.volume_path = base / e.at("volume_path").get<std::string>();
    entry.sidecar_path = base / e.at("sidecar_path").get<std::string>();
    entries.push_back(std::move(entry));
  }
  return entries;
}

}  // namespace ps
