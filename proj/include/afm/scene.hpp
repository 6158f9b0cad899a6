#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "afm/geometry.hpp"
#include "afm/tensor.hpp"

namespace afm {

inline constexpr std::size_t kImageSize = 64;
inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kHorizon = 8;  // waypoints per trajectory
inline constexpr double kWaypointSpacing = 1.0;  // meters

enum class Command : std::uint8_t { Follow = 0, Left = 1, Right = 2 };
inline constexpr std::size_t kNumCommands = 3;

const char* command_name(Command c);
Command parse_command(const std::string& name);

// Waypoints in the ego frame, meters: x forward, y left.
using Trajectory = std::vector<Vec2>;

// Roadside box. Positions are in the road frame of a SceneSpec (arc length
// along the centerline, signed lateral offset) or, inside RoadScene, world frame.
struct Obstacle {
  double s = 0.0;
  double lateral = 0.0;
  double length = 2.0;
  double width = 1.0;
  double height = 1.5;
  std::uint8_t color = 0;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  double curvature = 0.0;   // 1/m, positive turns left
  double lane_width = 3.0;  // m
  std::vector<Obstacle> obstacles;
  double lighting = 1.0;    // [0.3, 1.0]
  Command command = Command::Follow;
  double ego_offset = 0.0;   // m left of the centerline
  double ego_heading = 0.0;  // rad relative to the road tangent
};

// Geometry consumed by the rasterizer: a world-frame centerline plus boxes.
struct WorldBox {
  Pose2 pose;  // footprint centre and yaw
  double length = 2.0;
  double width = 1.0;
  double height = 1.5;
  std::uint8_t color = 0;
};

struct RoadScene {
  Polyline centerline;
  double half_width = 1.5;
  double lighting = 1.0;
  std::vector<WorldBox> boxes;
};

inline constexpr double kEgoLength = 4.5;
inline constexpr double kEgoWidth = 1.8;

struct Camera {
  double height = 1.6;
  double pitch = 0.15;      // rad, downward
  double focal = 38.0;      // pixels
  double far_clip = 60.0;   // m
  int supersample = 2;      // per axis
};

// Ego-view [3, 64, 64] image in [0,1], quantized to multiples of 1/255.
Tensor render_view(const RoadScene& scene, const Pose2& ego, const Camera& camera = {});

struct RenderedScene {
  Tensor image;
  Trajectory waypoints;
};

RenderedScene render(const SceneSpec& spec);

// Centerline waypoints with exactly kWaypointSpacing chord between
// consecutive points, starting from the ego's foot point on the centerline.
Trajectory centerline_waypoints(const Polyline& centerline, const Pose2& ego,
                                std::size_t count = kHorizon, double spacing = kWaypointSpacing);

enum class Split : std::uint8_t { Train = 0, Eval = 1 };
enum class LightingRegime : std::uint8_t { Mixed = 0, Day = 1, Night = 2 };

LightingRegime parse_lighting(const std::string& name);

std::uint64_t scene_seed(std::uint64_t global_seed, Split split, std::uint32_t index);
SceneSpec sample_scene(std::uint64_t seed, LightingRegime regime, Command command);

struct DatasetRecord {
  Tensor image;  // [3, H, W]
  Trajectory waypoints;
  Command command = Command::Follow;
  double lighting = 1.0;
  std::uint64_t seed = 0;
};

struct Dataset {
  std::size_t height = kImageSize;
  std::size_t width = kImageSize;
  std::size_t horizon = kHorizon;
  std::vector<DatasetRecord> records;
};

Dataset generate_dataset(std::size_t n, Split split, LightingRegime regime, std::uint64_t global_seed);
void write_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace afm
