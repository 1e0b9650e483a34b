#include "core/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace ps {

Vec3 PlaneParams::normal() const {
  return normal_from_angles(theta_x, theta_y, theta_z);
}

const char* action_name(Action a) {
  switch (a) {
    case Action::IncThetaX: return "+theta_x";
    case Action::DecThetaX: return "-theta_x";
    case Action::IncThetaY: return "+theta_y";
    case Action::DecThetaY: return "-theta_y";
    case Action::IncThetaZ: return "+theta_z";
    case Action::DecThetaZ: return "-theta_z";
    case Action::IncOffset: return "+d";
    case Action::DecOffset: return "-d";
  }
  return "?";
}

void GridSpec::validate() const {
  if (size[0] < 8 || size[1] < 8)
    raise(ErrorCode::Contract, "plane grid must be at least 8x8 in-plane");
  if (size[2] % 2 == 0)
    raise(ErrorCode::Contract, "plane grid slab size must be odd");
  for (double s : spacing)
    if (!(s > 0.0))
      raise(ErrorCode::Contract, "plane grid spacing must be positive");
}

Vec3 normal_from_angles(double theta_x_deg, double theta_y_deg,
                        double theta_z_deg) {
  const Vec3 cosines{std::cos(deg_to_rad(theta_x_deg)),
                     std::cos(deg_to_rad(theta_y_deg)),
                     std::cos(deg_to_rad(theta_z_deg))};
  if (cosines.norm() < 1e-9)
    raise(ErrorCode::DegenerateNormal,
          "direction cosines vanish; plane normal undefined");
  return cosines.normalized();
}

std::array<double, 3> angles_from_normal(const Vec3& n) {
  if (std::abs(n.norm() - 1.0) > 1e-6)
    raise(ErrorCode::Contract, "angles_from_normal requires a unit vector");
  auto deg = [](double c) {
    return rad_to_deg(std::acos(std::clamp(c, -1.0, 1.0)));
  };
  return {deg(n.x), deg(n.y), deg(n.z)};
}

PlaneParams apply_action(const PlaneParams& p, Action a,
                         const ActionStep& step) {
  if (!(step.angle_deg > 0.0) || !(step.d_mm > 0.0))
    raise(ErrorCode::Contract, "action step sizes must be positive");
  PlaneParams q = p;
  switch (a) {
    case Action::IncThetaX: q.theta_x += step.angle_deg; break;
    case Action::DecThetaX: q.theta_x -= step.angle_deg; break;
    case Action::IncThetaY: q.theta_y += step.angle_deg; break;
    case Action::DecThetaY: q.theta_y -= step.angle_deg; break;
    case Action::IncThetaZ: q.theta_z += step.angle_deg; break;
    case Action::DecThetaZ: q.theta_z -= step.angle_deg; break;
    case Action::IncOffset: q.d += step.d_mm; break;
    case Action::DecOffset: q.d -= step.d_mm; break;
  }
  q.normal();  // propagates DegenerateNormal before the state is used
  return q;
}

void plane_basis(const Vec3& n, Vec3& u, Vec3& v) {
  // Fixed-priority reference axis: +x unless the normal is nearly parallel
  // to it. A least-aligned-axis rule would flip the basis 90 degrees every
  // time |nx| and |ny| swap order, which happens continually while a plane
  // fine-aligns near the +-z directions; a stable view matters more than a
  // maximally orthogonal reference.
  const Vec3 reference =
      std::abs(n.x) <= 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
  u = reference.cross(n).normalized();
  v = n.cross(u);
}

WorldPoint plane_origin(const Volume& vol, const PlaneParams& p) {
  const Vec3 n = p.normal();
  const WorldPoint c = vol.center();
  return c - (n.dot(c) + p.d) * n;
}

PlaneGrid sample_plane_grid(const Volume& vol, const PlaneParams& p,
                            const GridSpec& g) {
  g.validate();
  PlaneGrid grid;
  grid.params = p;
  grid.spec = g;
  const Vec3 n = p.normal();
  plane_basis(n, grid.u, grid.v);
  grid.origin = plane_origin(vol, p);

  const double ci = 0.5 * (g.size[0] - 1);
  const double cj = 0.5 * (g.size[1] - 1);
  const double ck = 0.5 * (g.size[2] - 1);

  grid.values.resize(g.sample_count());
  size_t idx = 0;
  for (uint32_t k = 0; k < g.size[2]; ++k) {
    const Vec3 off_n = (double(k) - ck) * g.spacing[2] * n;
    for (uint32_t j = 0; j < g.size[1]; ++j) {
      const Vec3 off_v = (double(j) - cj) * g.spacing[1] * grid.v;
      for (uint32_t i = 0; i < g.size[0]; ++i) {
        const Vec3 off_u = (double(i) - ci) * g.spacing[0] * grid.u;
        const WorldPoint q = grid.origin + off_u + off_v + off_n;
        grid.values[idx++] = static_cast<float>(sample_trilinear(vol, q));
      }
    }
  }
  return grid;
}

double param_distance(const PlaneParams& p1, const PlaneParams& p2,
                      double d_scale_mm) {
  if (!(d_scale_mm > 0.0))
    raise(ErrorCode::Contract, "param_distance requires d_scale > 0");
  const Vec3 dn = p1.normal() - p2.normal();
  const double dd = (p1.d - p2.d) / d_scale_mm;
  return std::sqrt(dn.dot(dn) + dd * dd);
}

double default_d_scale(const Volume& vol) {
  const Vec3 e = vol.extent();
  return 0.5 * std::max({e.x, e.y, e.z});
}

double plane_angle_deg(const Vec3& n1, const Vec3& n2) {
  const double c = std::clamp(std::abs(n1.dot(n2)), 0.0, 1.0);
  return rad_to_deg(std::acos(c));
}

double point_plane_distance(const PlaneParams& p, const WorldPoint& q) {
  return std::abs(p.normal().dot(q) + p.d);
}

}  // namespace ps
