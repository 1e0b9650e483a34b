#include "core/geometry.hpp"

#include <cmath>

#include <doctest.h>

#include "core/rng.hpp"
#include "test_util.hpp"

using namespace ps;

namespace {

Vec3 random_unit(Rng& rng) {
  while (true) {
    const Vec3 v{rng.normal(), rng.normal(), rng.normal()};
    if (v.norm() > 1e-3) return v.normalized();
  }
}

PlaneParams random_plane(Rng& rng) {
  const Vec3 n = random_unit(rng);
  const auto a = angles_from_normal(n);
  return {a[0], a[1], a[2], rng.uniform(-40.0, 40.0)};
}

}  // namespace

TEST_CASE("normal_from_angles on axis-aligned cases") {
  const Vec3 z = normal_from_angles(90, 90, 0);
  CHECK_NEAR(z.x, 0.0, 1e-9);
  CHECK_NEAR(z.y, 0.0, 1e-9);
  CHECK_NEAR(z.z, 1.0, 1e-12);

  const Vec3 x = normal_from_angles(0, 90, 90);
  CHECK_NEAR(x.x, 1.0, 1e-12);
  CHECK_NEAR(x.y, 0.0, 1e-9);
  CHECK_NEAR(x.z, 0.0, 1e-9);
}

TEST_CASE("normal_from_angles renormalizes the cosine vector") {
  const Vec3 n = normal_from_angles(60, 60, 45);
  CHECK_NEAR(n.norm(), 1.0, 1e-12);
  // Proportional to the raw cosines (0.5, 0.5, sqrt(0.5)).
  const double k = n.x / 0.5;
  CHECK_NEAR(n.y, 0.5 * k, 1e-12);
  CHECK_NEAR(n.z, std::sqrt(0.5) * k, 1e-12);
}

TEST_CASE("normal_from_angles rejects the degenerate direction") {
  try {
    normal_from_angles(90, 90, 90);
    FAIL("expected a degenerate-normal error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DegenerateNormal);
  }
}

TEST_CASE("angles_from_normal inverts normal_from_angles") {
  const auto a = angles_from_normal({0, 0, 1});
  CHECK_NEAR(a[0], 90.0, 1e-12);
  CHECK_NEAR(a[1], 90.0, 1e-12);
  CHECK_NEAR(a[2], 0.0, 1e-9);

  const auto b = angles_from_normal({1, 0, 0});
  CHECK_NEAR(b[0], 0.0, 1e-9);
  CHECK_NEAR(b[1], 90.0, 1e-12);
  CHECK_NEAR(b[2], 90.0, 1e-12);

  CHECK_THROWS_AS(angles_from_normal({1.0, 0.5, 0.0}), Error);

  Rng rng(71);
  for (int i = 0; i < 100; ++i) {
    const Vec3 n = random_unit(rng);
    const auto angles = angles_from_normal(n);
    const Vec3 back = normal_from_angles(angles[0], angles[1], angles[2]);
    CHECK_NEAR((back - n).norm(), 0.0, 1e-9);
  }
}

TEST_CASE("apply_action moves exactly one parameter") {
  const PlaneParams p{90, 90, 0, 10};
  const ActionStep step{8.0, 4.0};

  SUBCASE("offset increment") {
    const PlaneParams q = apply_action(p, Action::IncOffset, step);
    CHECK(q.d == 14.0);
    CHECK(q.theta_x == p.theta_x);
    CHECK(q.theta_y == p.theta_y);
    CHECK(q.theta_z == p.theta_z);
  }

  SUBCASE("theta_z decrement renormalizes the normal") {
    const PlaneParams q = apply_action(p, Action::DecThetaZ, step);
    CHECK(q.theta_z == -8.0);
    CHECK(q.d == p.d);
    CHECK_NEAR(q.normal().norm(), 1.0, 1e-12);
    // cos(90), cos(90), cos(-8) renormalized is still essentially +z.
    CHECK_NEAR(q.normal().z, 1.0, 1e-9);
  }

  SUBCASE("bit-identical untouched parameters over random planes") {
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
      const PlaneParams r = random_plane(rng);
      const auto a = Action(rng.next_below(8));
      const PlaneParams q = apply_action(r, a, step);
      int changed = 0;
      changed += q.theta_x != r.theta_x;
      changed += q.theta_y != r.theta_y;
      changed += q.theta_z != r.theta_z;
      changed += q.d != r.d;
      CHECK(changed == 1);
    }
  }

  SUBCASE("inverse pairs compose to the identity") {
    Rng rng(6);
    const Action inc[4] = {Action::IncThetaX, Action::IncThetaY,
                           Action::IncThetaZ, Action::IncOffset};
    const Action dec[4] = {Action::DecThetaX, Action::DecThetaY,
                           Action::DecThetaZ, Action::DecOffset};
    for (int i = 0; i < 100; ++i) {
      const PlaneParams r = random_plane(rng);
      const int k = int(rng.next_below(4));
      const PlaneParams back =
          apply_action(apply_action(r, inc[k], step), dec[k], step);
      CHECK_NEAR(back.theta_x, r.theta_x, 1e-9);
      CHECK_NEAR(back.theta_y, r.theta_y, 1e-9);
      CHECK_NEAR(back.theta_z, r.theta_z, 1e-9);
      CHECK_NEAR(back.d, r.d, 1e-9);
    }
  }
}

TEST_CASE("plane_basis is orthonormal") {
  Rng rng(8);
  for (int i = 0; i < 200; ++i) {
    const Vec3 n = random_unit(rng);
    Vec3 u, v;
    plane_basis(n, u, v);
    CHECK_NEAR(u.dot(v), 0.0, 1e-9);
    CHECK_NEAR(u.dot(n), 0.0, 1e-9);
    CHECK_NEAR(v.dot(n), 0.0, 1e-9);
    CHECK_NEAR(u.norm(), 1.0, 1e-9);
    CHECK_NEAR(v.norm(), 1.0, 1e-9);
  }
}

TEST_CASE("sample_plane_grid extracts an axis-aligned slab exactly") {
  // Odd dims put the volume center on a voxel center, so the grid lattice
  // lands on voxel centers and trilinear weights collapse.
  Volume vol;
  vol.dims = {15, 15, 9};
  vol.spacing = {1, 1, 1};
  vol.origin = {0, 0, 0};
  vol.voxels.resize(vol.voxel_count());
  Rng rng(21);
  for (auto& x : vol.voxels) x = float(rng.uniform(0.0, 1.0));

  const uint32_t iz = 6;
  const PlaneParams plane{90, 90, 0, -double(iz)};  // plane z = iz
  GridSpec spec{{9, 9, 3}, {1, 1, 1}};
  const PlaneGrid grid = sample_plane_grid(vol, plane, spec);

  // Basis for an essentially +z normal: u = -y, v = +x.
  CHECK_NEAR(grid.u.y, -1.0, 1e-9);
  CHECK_NEAR(grid.v.x, 1.0, 1e-9);

  const uint32_t kc = 1;  // central slab
  for (uint32_t i = 0; i < 9; ++i)
    for (uint32_t j = 0; j < 9; ++j) {
      const uint32_t ix = uint32_t(7 + (int(j) - 4));
      const uint32_t iy = uint32_t(7 - (int(i) - 4));
      CHECK_NEAR(double(grid.at(i, j, kc)), double(vol.at(ix, iy, iz)), 1e-6);
    }

  SUBCASE("central slab satisfies the plane equation") {
    const Vec3 n = plane.normal();
    for (uint32_t i = 0; i < 9; ++i)
      for (uint32_t j = 0; j < 9; ++j) {
        const WorldPoint p = grid.origin +
                             (double(i) - 4) * spec.spacing[0] * grid.u +
                             (double(j) - 4) * spec.spacing[1] * grid.v;
        CHECK(std::abs(n.dot(p) + plane.d) < 1e-6);
      }
  }
}

TEST_CASE("plane grid far outside the volume is all zeros") {
  Rng rng(3);
  const Volume vol = test::random_volume(rng, 8, 8, 8);
  const PlaneParams plane{90, 90, 0, -(vol.origin[2] + 1e4)};
  const PlaneGrid grid =
      sample_plane_grid(vol, plane, GridSpec{{8, 8, 3}, {1, 1, 1}});
  for (float v : grid.values) CHECK(v == 0.0f);
}

TEST_CASE("grid center equals the trilinear sample at the plane origin") {
  Rng rng(31);
  const Volume vol = test::random_volume(rng, 9, 9, 9);
  for (int i = 0; i < 20; ++i) {
    const PlaneParams plane = random_plane(rng);
    const GridSpec spec{{9, 9, 3}, {0.8, 0.8, 0.8}};
    const PlaneGrid grid = sample_plane_grid(vol, plane, spec);
    CHECK_NEAR(double(grid.at(4, 4, 1)), sample_trilinear(vol, grid.origin),
               1e-6);
  }
}

TEST_CASE("sample_plane_grid is translation-consistent") {
  Rng rng(13);
  const Volume vol = test::random_volume(rng, 10, 10, 10);
  for (int i = 0; i < 10; ++i) {
    const PlaneParams plane = random_plane(rng);
    const Vec3 n = plane.normal();
    const double delta = rng.uniform(-3.0, 3.0);

    PlaneParams shifted = plane;
    shifted.d += delta;
    Volume moved = vol;
    moved.origin = {vol.origin[0] - delta * n.x, vol.origin[1] - delta * n.y,
                    vol.origin[2] - delta * n.z};

    const GridSpec spec{{8, 8, 3}, {1.1, 1.1, 1.1}};
    const PlaneGrid a = sample_plane_grid(vol, plane, spec);
    const PlaneGrid b = sample_plane_grid(moved, shifted, spec);
    REQUIRE(a.values.size() == b.values.size());
    for (size_t k = 0; k < a.values.size(); ++k)
      CHECK_NEAR(double(a.values[k]), double(b.values[k]), 1e-6);
  }
}

TEST_CASE("param_distance is a symmetric metric with d scaling") {
  const PlaneParams p{90, 90, 0, 10};
  CHECK(param_distance(p, p, 25.0) == 0.0);

  PlaneParams q = p;
  q.d = p.d + 25.0;
  CHECK_NEAR(param_distance(p, q, 25.0), 1.0, 1e-12);

  Rng rng(23);
  for (int i = 0; i < 300; ++i) {
    const PlaneParams a = random_plane(rng);
    const PlaneParams b = random_plane(rng);
    const PlaneParams c = random_plane(rng);
    const double scale = rng.uniform(1.0, 50.0);
    const double ab = param_distance(a, b, scale);
    const double ba = param_distance(b, a, scale);
    const double ac = param_distance(a, c, scale);
    const double cb = param_distance(c, b, scale);
    CHECK(ab == ba);
    CHECK(ab <= ac + cb + 1e-12);
    CHECK(ab >= 0.0);
  }
}

TEST_CASE("plane_angle_deg folds flipped normals") {
  const Vec3 z{0, 0, 1};
  const Vec3 x{1, 0, 0};
  CHECK_NEAR(plane_angle_deg(z, z), 0.0, 1e-9);
  CHECK_NEAR(plane_angle_deg(z, x), 90.0, 1e-12);
  CHECK_NEAR(plane_angle_deg(z, -z), 0.0, 1e-9);

  Rng rng(29);
  for (int i = 0; i < 100; ++i) {
    const Vec3 n = random_unit(rng);
    // acos near |dot| = 1 turns 1e-16 dot noise into ~1e-6 degrees.
    CHECK_NEAR(plane_angle_deg(n, -n), 0.0, 1e-5);
    const double a = plane_angle_deg(n, random_unit(rng));
    CHECK(a >= 0.0);
    CHECK(a <= 90.0 + 1e-9);
  }
}

TEST_CASE("point_plane_distance") {
  const PlaneParams z0{90, 90, 0, 0};  // plane z = 0
  CHECK_NEAR(point_plane_distance(z0, {5, 7, 0}), 0.0, 1e-9);
  CHECK_NEAR(point_plane_distance(z0, {5, 7, 3}), 3.0, 1e-9);

  SUBCASE("displacement along the normal is recovered") {
    Rng rng(37);
    for (int i = 0; i < 100; ++i) {
      const PlaneParams p = random_plane(rng);
      const Vec3 n = p.normal();
      // A point on the plane, then displaced t mm along the normal.
      Vec3 u, v;
      plane_basis(n, u, v);
      const WorldPoint on_plane =
          -p.d * n + rng.uniform(-5.0, 5.0) * u + rng.uniform(-5.0, 5.0) * v;
      const double t = rng.uniform(0.0, 20.0);
      CHECK_NEAR(point_plane_distance(p, on_plane + t * n), t, 1e-9);
    }
  }
}

TEST_CASE("grid spec validation") {
  CHECK_THROWS_AS(GridSpec({{4, 9, 3}, {1, 1, 1}}).validate(), Error);
  CHECK_THROWS_AS(GridSpec({{9, 9, 4}, {1, 1, 1}}).validate(), Error);
  CHECK_THROWS_AS(GridSpec({{9, 9, 3}, {0, 1, 1}}).validate(), Error);
  CHECK_NOTHROW(GridSpec({{9, 9, 3}, {1, 1, 1}}).validate());
}
