#include "core/evaluation.hpp"

#include <algorithm>
#include <fstream>

#include <doctest.h>
#include <json.hpp>

#include "core/rng.hpp"
#include "test_util.hpp"

using namespace ps;

namespace {

GroundTruth axial_truth() {
  GroundTruth gt;
  gt.plane = {90, 90, 0, -16};  // plane z = 16
  gt.landmarks = {{10, 10, 16}, {20, 10, 16}, {10, 20, 16}};
  return gt;
}

}  // namespace

TEST_CASE("evaluate_plane") {
  const GroundTruth gt = axial_truth();

  SUBCASE("perfect detection scores zero on both metrics") {
    const EvalResult r = evaluate_plane(gt.plane, gt);
    CHECK_NEAR(r.e_d_mm, 0.0, 1e-9);
    CHECK_NEAR(r.e_theta_deg, 0.0, 1e-9);
  }

  SUBCASE("a 2 mm offset along the normal is 2 mm of landmark error") {
    PlaneParams detected = gt.plane;
    detected.d += 2.0;
    const EvalResult r = evaluate_plane(detected, gt);
    CHECK_NEAR(r.e_d_mm, 2.0, 1e-9);
    CHECK_NEAR(r.e_theta_deg, 0.0, 1e-9);
  }

  SUBCASE("an orthogonal plane through a landmark scores 90 degrees") {
    // Plane x = 10 contains landmark (10, 10, 16).
    const PlaneParams detected{0, 90, 90, -10};
    const EvalResult r = evaluate_plane(detected, gt);
    CHECK_NEAR(r.e_theta_deg, 90.0, 1e-9);
    CHECK_NEAR(point_plane_distance(detected, gt.landmarks[0]), 0.0, 1e-9);
  }

  SUBCASE("e_d is invariant to a sign flip of the detected normal") {
    PlaneParams detected = gt.plane;
    detected.d += 3.0;
    // Same geometric plane with the opposite normal: negate all cosines.
    const Vec3 n = detected.normal();
    const auto flipped_angles = angles_from_normal(-n);
    const PlaneParams flipped{flipped_angles[0], flipped_angles[1],
                              flipped_angles[2], -detected.d};
    const EvalResult a = evaluate_plane(detected, gt);
    const EvalResult b = evaluate_plane(flipped, gt);
    CHECK_NEAR(a.e_d_mm, b.e_d_mm, 1e-9);
    CHECK_NEAR(a.e_theta_deg, b.e_theta_deg, 1e-6);
  }
}

TEST_CASE("aggregate statistics are recomputable from rows") {
  std::vector<EvalRow> rows(3);
  rows[0].result = {1.0, 10.0, 5, 1.0};
  rows[1].result = {2.0, 20.0, 5, 1.0};
  rows[2].result = {6.0, 30.0, 5, 1.0};

  const Aggregate a = aggregate_rows(rows);
  CHECK_NEAR(a.e_d_mean, 3.0, 1e-12);
  CHECK_NEAR(a.e_theta_mean, 20.0, 1e-12);
  // Sample standard deviation.
  CHECK_NEAR(a.e_d_std, std::sqrt(((1 - 3.) * (1 - 3.) + (2 - 3.) * (2 - 3.) +
                                   (6 - 3.) * (6 - 3.)) / 2.0), 1e-12);
  CHECK_NEAR(a.e_theta_std, 10.0, 1e-12);
  CHECK(a.count == 3);
}

TEST_CASE("reference table carries the published context values") {
  const auto table = reference_table();
  REQUIRE(table.size() == 12);

  auto find = [&](const std::string& plane, const std::string& model) {
    for (const auto& e : table)
      if (plane == e.plane && model == e.model) return e;
    FAIL("missing reference entry");
    return table[0];
  };

  const auto midsag = find("mid-sagittal", "duel-ddqn");
  CHECK(midsag.e_d_mean == 1.53);
  CHECK(midsag.e_d_std == 2.20);
  CHECK(midsag.e_theta_mean == 2.44);
  CHECK(midsag.e_theta_std == 5.04);

  const auto acpc = find("acpc", "dqn");
  CHECK(acpc.e_theta_mean == 3.23);
  CHECK(acpc.e_theta_std == 6.03);

  const auto chamber = find("4-chamber", "duel-dqn");
  CHECK(chamber.e_d_mean == 4.84);
  CHECK(chamber.e_d_std == 3.03);
}

TEST_CASE("evaluate_suite runs every variant from one fixed init per volume") {
  const auto dir = test::scratch_dir("eval");

  PhantomConfig pcfg;
  pcfg.dims = {20, 20, 20};
  pcfg.spacing = {2, 2, 2};
  pcfg.max_tilt_deg = 10;
  pcfg.max_offset_mm = 4;
  pcfg.slab_thickness_mm = 6;
  pcfg.seed = 31;
  const auto manifest = generate_dataset(pcfg, 3, dir / "data");

  EpisodeConfig ecfg;
  ecfg.grid_size = {8, 8, 3};
  ecfg.schedule = {{{3.0, 8.0, 4.0}, {2.0, 4.0, 3.0}}};
  ecfg.max_steps_per_level = 8;

  // An untrained checkpoint is enough to exercise the protocol.
  Rng rng(3);
  const nn::Network net(
      nn::Architecture::default_for_grid(ecfg.grid_size, false), rng);
  const auto ckpt = dir / "net.pqn";
  nn::save_checkpoint(net, ckpt);

  std::map<std::string, std::filesystem::path> checkpoints{
      {"dqn", ckpt}, {"dqn-twin", ckpt}, {"missing", dir / "absent.pqn"}};

  const EvalReport report =
      evaluate_suite(checkpoints, manifest, 99, ecfg, dir / "out");

  CHECK(report.rows.size() == 2 * 3);  // present variants x volumes
  REQUIRE(report.missing_variants.size() == 1);
  CHECK(report.missing_variants[0] == "missing");

  SUBCASE("identical checkpoints produce identical columns") {
    for (size_t v = 0; v < 3; ++v) {
      const auto& a = report.rows[v * 2];
      const auto& b = report.rows[v * 2 + 1];
      CHECK(a.volume == b.volume);
      CHECK(a.result.e_d_mm == b.result.e_d_mm);
      CHECK(a.result.e_theta_deg == b.result.e_theta_deg);
      CHECK(a.result.steps == b.result.steps);
    }
  }

  SUBCASE("every variant starts from the identical initial plane") {
    for (size_t v = 0; v < 3; ++v) {
      const auto& a = report.rows[v * 2];
      const auto& b = report.rows[v * 2 + 1];
      CHECK(a.init_plane.theta_x == b.init_plane.theta_x);
      CHECK(a.init_plane.theta_y == b.init_plane.theta_y);
      CHECK(a.init_plane.theta_z == b.init_plane.theta_z);
      CHECK(a.init_plane.d == b.init_plane.d);
    }
    // Trajectory logs exist per (volume, variant).
    CHECK(std::filesystem::exists(dir / "out" / "trajectories" /
                                  "phantom_0000_dqn.jsonl"));
  }

  SUBCASE("aggregates match an independent recomputation") {
    for (const auto& [variant, agg] : report.per_variant) {
      std::vector<EvalRow> rows;
      for (const auto& r : report.rows)
        if (r.variant == variant) rows.push_back(r);
      const Aggregate check = aggregate_rows(rows);
      CHECK_NEAR(agg.e_d_mean, check.e_d_mean, 1e-12);
      CHECK_NEAR(agg.e_d_std, check.e_d_std, 1e-12);
      CHECK_NEAR(agg.e_theta_mean, check.e_theta_mean, 1e-12);
      CHECK_NEAR(agg.e_theta_std, check.e_theta_std, 1e-12);
    }
  }

  SUBCASE("report files are written with the documented shapes") {
    write_report_csv(report, dir / "report.csv");
    write_report_json(report, dir / "report.json");

    std::ifstream csv(dir / "report.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "volume,variant,e_d_mm,e_theta_deg,steps,ms_per_step");
    size_t data_lines = 0;
    std::string line;
    while (std::getline(csv, line))
      if (!line.empty()) data_lines += 1;
    CHECK(data_lines == report.rows.size());

    std::ifstream js(dir / "report.json");
    const std::string body((std::istreambuf_iterator<char>(js)),
                           std::istreambuf_iterator<char>());
    CHECK(body.find("NOT REPRODUCIBLE HERE") != std::string::npos);
    CHECK(body.find("1.53") != std::string::npos);
  }

  SUBCASE("the report is stable under manifest reordering") {
    // Rewrite the manifest with the entry array reversed.
    nlohmann::json entries;
    {
      std::ifstream in(manifest);
      in >> entries;
    }
    std::reverse(entries.begin(), entries.end());
    const auto reordered = dir / "data" / "manifest_reversed.json";
    {
      std::ofstream out(reordered);
      out << entries.dump(2) << "\n";
    }
    std::map<std::string, std::filesystem::path> one{{"dqn", ckpt}};
    const EvalReport r1 = evaluate_suite(one, manifest, 99, ecfg, {});
    const EvalReport r2 = evaluate_suite(one, reordered, 99, ecfg, {});
    REQUIRE(r1.rows.size() == r2.rows.size());
    for (size_t i = 0; i < r1.rows.size(); ++i) {
      CHECK(r1.rows[i].volume == r2.rows[i].volume);
      CHECK(r1.rows[i].result.e_d_mm == r2.rows[i].result.e_d_mm);
    }
  }
}

TEST_CASE("evaluate_plane requires landmarks") {
  GroundTruth gt;
  gt.plane = {90, 90, 0, 0};
  CHECK_THROWS_AS(evaluate_plane(gt.plane, gt), Error);
}
