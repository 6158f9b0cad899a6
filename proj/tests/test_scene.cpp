#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "afm/scene.hpp"
#include "doctest.h"

using namespace afm;

namespace {

double mean_of(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data()) s += v;
  return s / static_cast<double>(t.numel());
}

SceneSpec straight_spec() {
  SceneSpec spec;
  spec.curvature = 0.0;
  spec.lane_width = 3.0;
  spec.lighting = 1.0;
  return spec;
}

}  // namespace

TEST_CASE("rendering is deterministic and quantized") {
  const SceneSpec spec = sample_scene(42, LightingRegime::Mixed, Command::Left);
  const RenderedScene a = render(spec), b = render(spec);
  CHECK(a.image.shape() == Shape{3, 64, 64});
  CHECK(std::equal(a.image.data().begin(), a.image.data().end(), b.image.data().begin()));
  for (double v : a.image.data()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    CHECK(std::abs(v * 255.0 - std::round(v * 255.0)) < 1e-9);
  }
  const SceneSpec again = sample_scene(42, LightingRegime::Mixed, Command::Left);
  CHECK(again.curvature == spec.curvature);
  CHECK(again.obstacles.size() == spec.obstacles.size());
}

TEST_CASE("straight road waypoints lie on the centerline at fixed spacing") {
  const RenderedScene r = render(straight_spec());
  REQUIRE(r.waypoints.size() == kHorizon);
  for (std::size_t i = 0; i < r.waypoints.size(); ++i) {
    CHECK(std::abs(r.waypoints[i].y) < 1e-12);
    CHECK(r.waypoints[i].x == doctest::Approx(static_cast<double>(i + 1)).epsilon(1e-9));
  }

  for (std::uint64_t seed : {1, 2, 3, 4, 5, 6}) {
    const auto c = static_cast<Command>(seed % 3);
    const RenderedScene curved = render(sample_scene(seed, LightingRegime::Day, c));
    Vec2 prev{0.0, 0.0};
    for (std::size_t i = 0; i < curved.waypoints.size(); ++i) {
      const Vec2 p = curved.waypoints[i];
      if (i > 0) CHECK(std::abs((p - prev).norm() - kWaypointSpacing) < 1e-6);
      prev = p;
    }
  }
}

TEST_CASE("left and right commands curve the path the right way") {
  const RenderedScene left = render(sample_scene(7, LightingRegime::Day, Command::Left));
  const RenderedScene right = render(sample_scene(7, LightingRegime::Day, Command::Right));
  const auto bend = [](const Trajectory& t) { return t.back().y - 8.0 * t.front().y; };
  CHECK(bend(left.waypoints) > bend(right.waypoints));
}

TEST_CASE("lighting scales intensity") {
  SceneSpec day = straight_spec(), night = straight_spec();
  night.lighting = 0.3;
  const double ratio = mean_of(render(night).image) / mean_of(render(day).image);
  CHECK(ratio >= 0.25);
  CHECK(ratio <= 0.45);
  SceneSpec bad = straight_spec();
  bad.lighting = 0.1;
  CHECK_THROWS_AS(render(bad), std::invalid_argument);
}

TEST_CASE("obstacle on the ego spawn is rejected") {
  SceneSpec spec = straight_spec();
  spec.obstacles.push_back({0.5, 0.0, 2.0, 1.0, 1.5, 0});
  CHECK_THROWS_AS(render(spec), std::invalid_argument);
  spec.obstacles[0].s = 20.0;
  CHECK_NOTHROW(render(spec));
}

TEST_CASE("datasets: splits, balance and file round trip") {
  const Dataset train = generate_dataset(60, Split::Train, LightingRegime::Mixed, 3);
  const Dataset eval = generate_dataset(60, Split::Eval, LightingRegime::Mixed, 3);
  std::set<std::uint64_t> seeds;
  for (const auto& r : train.records) seeds.insert(r.seed);
  for (const auto& r : eval.records) CHECK(seeds.count(r.seed) == 0);

  std::size_t counts[kNumCommands] = {};
  for (const auto& r : train.records) ++counts[static_cast<std::size_t>(r.command)];
  for (std::size_t c : counts) CHECK(c * 4 >= train.records.size());

  std::size_t dark = 0;
  for (const auto& r : generate_dataset(20, Split::Train, LightingRegime::Night, 3).records) dark += r.lighting < 0.5;
  CHECK(dark == 20);

  const auto path = std::filesystem::temp_directory_path() / "afm_test_dataset.bin";
  write_dataset(train, path);
  const Dataset back = read_dataset(path);
  REQUIRE(back.records.size() == train.records.size());
  for (std::size_t i = 0; i < back.records.size(); ++i) {
    const auto& a = train.records[i];
    const auto& b = back.records[i];
    CHECK(std::equal(a.image.data().begin(), a.image.data().end(), b.image.data().begin()));
    CHECK(a.command == b.command);
    CHECK(a.lighting == b.lighting);
    CHECK(a.seed == b.seed);
    for (std::size_t k = 0; k < a.waypoints.size(); ++k) CHECK(a.waypoints[k].y == b.waypoints[k].y);
  }

  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 100);
  CHECK_THROWS_AS(read_dataset(path), std::runtime_error);
  CHECK_THROWS_AS(read_dataset(std::filesystem::temp_directory_path() / "afm_missing.bin"), std::runtime_error);
  CHECK_THROWS_AS(generate_dataset(0, Split::Train, LightingRegime::Mixed, 3), std::invalid_argument);
}

TEST_CASE("command and lighting names") {
  for (Command c : {Command::Follow, Command::Left, Command::Right}) CHECK(parse_command(command_name(c)) == c);
  CHECK_THROWS_AS(parse_command("reverse"), std::invalid_argument);
  CHECK(parse_lighting("night") == LightingRegime::Night);
  CHECK_THROWS_AS(parse_lighting("dusk"), std::invalid_argument);
}

TEST_CASE("footprint overlap") {
  const Pose2 a{0.0, 0.0, 0.0};
  CHECK(footprints_overlap(a, 4.0, 2.0, {3.0, 0.0, 0.0}, 4.0, 2.0));
  CHECK_FALSE(footprints_overlap(a, 4.0, 2.0, {5.0, 0.0, 0.0}, 4.0, 2.0));
  CHECK(footprints_overlap(a, 4.0, 2.0, {0.0, 1.9, 0.7}, 4.0, 2.0));
  CHECK_FALSE(footprints_overlap(a, 4.0, 2.0, {0.0, 4.0, 0.3}, 4.0, 1.0));
}
