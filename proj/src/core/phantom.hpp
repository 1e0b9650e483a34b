#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "core/geometry.hpp"
#include "core/volume.hpp"

namespace ps {

// Analytically known target for a generated volume.
struct GroundTruth {
  PlaneParams plane;
  std::vector<WorldPoint> landmarks;  // >= 3 non-collinear on-plane points
};

struct PhantomConfig {
  std::array<uint32_t, 3> dims{64, 64, 64};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  double max_tilt_deg = 20.0;     // cone half-angle of the target normal, [0, 45]
  double max_offset_mm = 10.0;    // target plane offset range around the center
  double noise_amp = 0.02;        // additive texture noise amplitude
  double slab_thickness_mm = 6.0; // >= 2 * max(spacing)
  bool mirror_noise = true;       // false: noise not symmetric about the plane
  uint64_t seed = 1;

  void validate() const;
};

// Builds a synthetic volume containing a bright slab centered on a randomly
// drawn target plane, a smooth background texture mirror-symmetric about that
// plane, and additive band-limited noise (mirrored unless disabled).
// Deterministic in the seed.
std::pair<Volume, GroundTruth> generate_phantom(const PhantomConfig& cfg);

struct DatasetEntry {
  std::filesystem::path volume_path;
  std::filesystem::path sidecar_path;
};

// Writes `count` phantoms (volume + JSON sidecar with plane, landmarks and
// seed) under out_dir plus a manifest.json listing them; entry i uses seed
// cfg.seed + i. Returns the manifest path.
std::filesystem::path generate_dataset(const PhantomConfig& cfg, uint32_t count,
                                       const std::filesystem::path& out_dir);

// Sidecar / manifest readers used by training and evaluation.
GroundTruth load_ground_truth(const std::filesystem::path& sidecar_path);
std::vector<DatasetEntry> load_manifest(const std::filesystem::path& manifest_path);

}  // namespace ps
