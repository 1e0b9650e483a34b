#include "core/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

static_assert(std::endian::native == std::endian::little,
              "volume format I/O assumes a little-endian host");

namespace ps {

namespace {

constexpr char kMagic[4] = {'P', 'V', 'O', 'L'};
constexpr uint32_t kVersion = 1;

template <class T>
void write_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void read_raw(std::istream& in, T& v, const char* what) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in)
    raise(ErrorCode::Format, std::string("volume file truncated in ") + what);
}

}  // namespace

WorldPoint Volume::center() const {
  return {origin[0] + 0.5 * (dims[0] - 1) * spacing[0],
          origin[1] + 0.5 * (dims[1] - 1) * spacing[1],
          origin[2] + 0.5 * (dims[2] - 1) * spacing[2]};
}

Vec3 Volume::extent() const {
  return {(dims[0] - 1) * spacing[0], (dims[1] - 1) * spacing[1],
          (dims[2] - 1) * spacing[2]};
}

bool Volume::contains(const WorldPoint& p) const {
  for (int axis = 0; axis < 3; ++axis) {
    const double u = (p[axis] - origin[axis]) / spacing[axis];
    if (u < 0.0 || u > double(dims[axis] - 1)) return false;
  }
  return true;
}

void Volume::validate() const {
  for (int axis = 0; axis < 3; ++axis) {
    if (dims[axis] < 2)
      raise(ErrorCode::Contract, "volume dims must be >= 2 per axis");
    if (!(spacing[axis] > 0.0))
      raise(ErrorCode::Contract, "volume spacing must be positive");
    if (!std::isfinite(origin[axis]))
      raise(ErrorCode::Contract, "volume origin must be finite");
  }
  if (voxels.size() != voxel_count())
    raise(ErrorCode::Contract, "voxel payload length does not match dims");
}

Volume load_volume(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    raise(ErrorCode::Io, "cannot open volume file: " + path.string());

  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    raise(ErrorCode::Format, "not a PVOL volume file: " + path.string());

  uint32_t version = 0;
  read_raw(in, version, "version");
  if (version != kVersion)
    raise(ErrorCode::Format,
          "unsupported PVOL version " + std::to_string(version));

  Volume v;
  for (auto& d : v.dims) read_raw(in, d, "dims");
  for (auto& s : v.spacing) read_raw(in, s, "spacing");
  for (auto& o : v.origin) read_raw(in, o, "origin");

  const size_t count = size_t(v.dims[0]) * v.dims[1] * v.dims[2];
  v.voxels.resize(count);
  in.read(reinterpret_cast<char*>(v.voxels.data()),
          std::streamsize(count * sizeof(float)));
  if (in.gcount() != std::streamsize(count * sizeof(float)))
    raise(ErrorCode::Format,
          "volume file truncated: expected " + std::to_string(count) +
              " voxels in " + path.string());
  v.validate();
  return v;
}

void save_volume(const Volume& volume, const std::filesystem::path& path) {
  volume.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out)
    raise(ErrorCode::Io, "cannot write volume file: " + path.string());
  out.write(kMagic, 4);
  write_raw(out, kVersion);
  for (auto d : volume.dims) write_raw(out, d);
  for (auto s : volume.spacing) write_raw(out, s);
  for (auto o : volume.origin) write_raw(out, o);
  out.write(reinterpret_cast<const char*>(volume.voxels.data()),
            std::streamsize(volume.voxels.size() * sizeof(float)));
  if (!out)
    raise(ErrorCode::Io, "I/O failure writing volume: " + path.string());
}

double sample_trilinear(const Volume& volume, const WorldPoint& p) {
  double u[3];
  for (int axis = 0; axis < 3; ++axis) {
    u[axis] = (p[axis] - volume.origin[axis]) / volume.spacing[axis];
    if (!(u[axis] >= 0.0) || u[axis] > double(volume.dims[axis] - 1))
      return 0.0;
  }

  uint32_t i0[3];
  double f[3];
  for (int axis = 0; axis < 3; ++axis) {
    double fl = std::floor(u[axis]);
    i0[axis] = static_cast<uint32_t>(fl);
    if (i0[axis] >= volume.dims[axis] - 1) {
      // u == n-1 exactly: collapse onto the last cell with weight 1.
      i0[axis] = volume.dims[axis] - 2;
      fl = double(i0[axis]);
    }
    f[axis] = u[axis] - fl;
  }

  const uint32_t x0 = i0[0], y0 = i0[1], z0 = i0[2];
  const double fx = f[0], fy = f[1], fz = f[2];

  auto v = [&](uint32_t dx, uint32_t dy, uint32_t dz) -> double {
    return volume.at(x0 + dx, y0 + dy, z0 + dz);
  };

  const double c00 = v(0, 0, 0) * (1 - fx) + v(1, 0, 0) * fx;
  const double c10 = v(0, 1, 0) * (1 - fx) + v(1, 1, 0) * fx;
  const double c01 = v(0, 0, 1) * (1 - fx) + v(1, 0, 1) * fx;
  const double c11 = v(0, 1, 1) * (1 - fx) + v(1, 1, 1) * fx;
  const double c0 = c00 * (1 - fy) + c10 * fy;
  const double c1 = c01 * (1 - fy) + c11 * fy;
  return c0 * (1 - fz) + c1 * fz;
}

Volume normalize_intensities(const Volume& volume) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (float x : volume.voxels) {
    if (!std::isfinite(x)) continue;
    lo = std::min(lo, double(x));
    hi = std::max(hi, double(x));
  }
  if (!std::isfinite(lo))
    raise(ErrorCode::Contract, "volume has no finite voxel");

  Volume out = volume;
  if (hi <= lo) {
    std::fill(out.voxels.begin(), out.voxels.end(), 0.0f);
    return out;
  }
  const double scale = 1.0 / (hi - lo);
  for (auto& x : out.voxels)
    x = static_cast<float>((double(x) - lo) * scale);
  return out;
}

}  // namespace ps
