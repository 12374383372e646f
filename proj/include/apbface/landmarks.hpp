#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace apb {

// Head orientation in radians.
struct PoseTriple {
  double yaw = 0.0;
  double pitch = 0.0;
  double roll = 0.0;

  friend bool operator==(const PoseTriple&, const PoseTriple&) = default;
};

// Per-eye height / width ratio; 0 means closed.
struct BlinkPair {
  double left = 0.0;
  double right = 0.0;

  friend bool operator==(const BlinkPair&, const BlinkPair&) = default;
};

// Observed ranges of the announcer corpus the method was developed on (radians).
struct PoseRange {
  double lo, hi;
};
inline constexpr PoseRange kYawRange{-0.354, 0.196};
inline constexpr PoseRange kPitchRange{-0.367, 0.379};
inline constexpr PoseRange kRollRange{-0.502, 0.509};

struct PoseRangeFlags {
  bool yaw = false;
  bool pitch = false;
  bool roll = false;
  bool any() const { return yaw || pitch || roll; }
};

// Flags components outside the corpus ranges; throws DataError for non-finite values.
PoseRangeFlags check_pose_range(const PoseTriple& p);
void validate_blink(const BlinkPair& b);

struct Point2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point2&, const Point2&) = default;
};

using IndexGroups = std::map<std::string, std::vector<int>>;

// N normalized 2-D keypoints over the face crop with named index groups.
struct LandmarkSet {
  std::vector<Point2> points;
  IndexGroups groups;

  std::size_t size() const { return points.size(); }
  // Throws ConfigError on overlapping/out-of-range groups or non-finite coordinates.
  void validate() const;
  std::vector<Point2> group_points(const std::string& name) const;
  // Flattened [x0, y0, x1, y1, ...].
  std::vector<double> flat() const;
  static LandmarkSet from_flat(const std::vector<double>& xy, IndexGroups groups);
};

// Vertical extent (max y - min y) of a named group.
double group_vertical_extent(const LandmarkSet& l, const std::string& group);

nlohmann::json to_json(const LandmarkSet& l);
LandmarkSet landmarks_from_json(const nlohmann::json& j);

}  // namespace apb
