#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "core/common.hpp"
#include "core/volume.hpp"

namespace ps {

// Plane a*x + b*y + c*z + d = 0 parameterized by the direction angles of its
// normal plus a signed offset. The angles are free scalars in degrees and are
// only ever interpreted through their cosines; the derived normal is the
// cosine vector renormalized to unit length.
struct PlaneParams {
  double theta_x = 90.0;  // degrees
  double theta_y = 90.0;
  double theta_z = 0.0;
  double d = 0.0;         // mm

  // Unit normal (a, b, c). Throws Error(DegenerateNormal) when all three
  // cosines vanish (e.g. theta = (90, 90, 90)).
  Vec3 normal() const;
};

// The agent's 8 moves: one signed step on a single parameter.
enum class Action : uint8_t {
  IncThetaX = 0,
  DecThetaX = 1,
  IncThetaY = 2,
  DecThetaY = 3,
  IncThetaZ = 4,
  DecThetaZ = 5,
  IncOffset = 6,
  DecOffset = 7,
};

constexpr int kActionCount = 8;

const char* action_name(Action a);

struct ActionStep {
  double angle_deg = 8.0;
  double d_mm = 4.0;
};

// Shape of the resampled plane block: size in samples per axis (u, v, normal)
// and sample spacing in mm. The third size must be odd so a central in-plane
// slab exists.
struct GridSpec {
  std::array<uint32_t, 3> size{50, 50, 9};
  std::array<double, 3> spacing{3.0, 3.0, 3.0};

  size_t sample_count() const {
    return size_t(size[0]) * size[1] * size[2];
  }
  void validate() const;
};

// A plane-centered block of intensities sampled from a volume, together with
// the frame it was sampled in. values is x-fastest over (i, j, k) where i
// runs along u, j along v and k along the normal.
struct PlaneGrid {
  std::vector<float> values;
  PlaneParams params;
  GridSpec spec;
  Vec3 u, v;            // in-plane orthonormal basis
  WorldPoint origin;    // plane origin: volume center projected onto the plane

  float at(uint32_t i, uint32_t j, uint32_t k) const {
    return values[(size_t(k) * spec.size[1] + j) * spec.size[0] + i];
  }
};

// Unit normal from direction angles: (cos tx, cos ty, cos tz) renormalized.
Vec3 normal_from_angles(double theta_x_deg, double theta_y_deg,
                        double theta_z_deg);

// Inverse of normal_from_angles for unit input: theta_i = acos(n_i) degrees.
// Throws Error(Contract) unless ||n|| == 1 within 1e-6.
std::array<double, 3> angles_from_normal(const Vec3& n);

// Applies one action: exactly one of the four parameters moves by the step;
// the others are bit-identical. Validates that the new normal is not
// degenerate.
PlaneParams apply_action(const PlaneParams& p, Action a, const ActionStep& step);

// Deterministic in-plane basis for a unit normal: u = normalize(e x n) with
// e = +x (or +y when |n.x| > 0.9), v = n x u. Continuous wherever the normal
// stays clear of the reference axis, in particular through the whole
// near-axial neighborhood where plane searches converge.
void plane_basis(const Vec3& n, Vec3& u, Vec3& v);

// Projects the volume's physical center onto the plane.
WorldPoint plane_origin(const Volume& vol, const PlaneParams& p);

// Samples the grid around the plane origin:
//   value(i,j,k) = trilinear(vol, origin + (i-ci)*Sx*u + (j-cj)*Sy*v + (k-ck)*Sz*n)
// with (ci, cj, ck) the central indices. Out-of-volume samples are 0.
PlaneGrid sample_plane_grid(const Volume& vol, const PlaneParams& p,
                            const GridSpec& g);

// Euclidean distance between parameter tuples: the unit normals difference
// plus the offset difference scaled by 1/d_scale.
double param_distance(const PlaneParams& p1, const PlaneParams& p2,
                      double d_scale_mm);

// Offset scale used by rewards and metrics: half the largest physical extent,
// so a full-volume offset error weighs comparably to a normal flip.
double default_d_scale(const Volume& vol);

// Angle between two unit normals in degrees, folded into [0, 90] so that a
// flipped normal describes the same plane.
double plane_angle_deg(const Vec3& n1, const Vec3& n2);

// |a*qx + b*qy + c*qz + d| with unit (a, b, c).
double point_plane_distance(const PlaneParams& p, const WorldPoint& q);

}  // namespace ps
