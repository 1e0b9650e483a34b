#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "core/common.hpp"

namespace ps {

// A 3D scalar field on a regular grid. Voxel payload is 32-bit float stored
// x-fastest; all geometry is computed in 64-bit. Immutable by convention:
// every operation that would change a volume returns a new one.
struct Volume {
  std::array<uint32_t, 3> dims{};    // nx, ny, nz (each >= 2)
  std::array<double, 3> spacing{};   // mm per voxel, > 0
  std::array<double, 3> origin{};    // world position of voxel (0,0,0), mm
  std::vector<float> voxels;         // nx*ny*nz values, x-fastest

  size_t voxel_count() const {
    return size_t(dims[0]) * dims[1] * dims[2];
  }

  size_t index(uint32_t ix, uint32_t iy, uint32_t iz) const {
    return (size_t(iz) * dims[1] + iy) * dims[0] + ix;
  }

  float at(uint32_t ix, uint32_t iy, uint32_t iz) const {
    return voxels[index(ix, iy, iz)];
  }

  // World position of a voxel center.
  WorldPoint voxel_center(uint32_t ix, uint32_t iy, uint32_t iz) const {
    return {origin[0] + ix * spacing[0], origin[1] + iy * spacing[1],
            origin[2] + iz * spacing[2]};
  }

  // Physical center of the voxel-center bounding box.
  WorldPoint center() const;

  // Extent of the voxel-center bounding box per axis, mm.
  Vec3 extent() const;

  bool contains(const WorldPoint& p) const;

  // Throws Error(Contract) if dims/spacing/payload violate the invariants.
  void validate() const;
};

// Binary volume format: magic "PVOL", version u32=1, dims 3*u32,
// spacing 3*f64, origin 3*f64, voxel payload nx*ny*nz*f32. Little-endian,
// no compression, no padding.
Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& volume, const std::filesystem::path& path);

// Trilinear interpolation of the 8 voxels surrounding p in continuous voxel
// coordinates (p - origin) / spacing. Points outside [0, n-1] along any axis
// sample as exactly 0.
double sample_trilinear(const Volume& volume, const WorldPoint& p);

// Linear rescale of the intensities to [0, 1]; a constant volume maps to
// all zeros.
Volume normalize_intensities(const Volume& volume);

}  // namespace ps
