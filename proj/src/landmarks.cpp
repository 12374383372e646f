#include "apbface/landmarks.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "apbface/error.hpp"

namespace apb {

namespace {
bool outside(double v, PoseRange r) { return v < r.lo || v > r.hi; }
}  // namespace

PoseRangeFlags check_pose_range(const PoseTriple& p) {
  if (!std::isfinite(p.yaw) || !std::isfinite(p.pitch) || !std::isfinite(p.roll)) {
    throw DataError("pose: non-finite component");
  }
  return {outside(p.yaw, kYawRange), outside(p.pitch, kPitchRange), outside(p.roll, kRollRange)};
}

void validate_blink(const BlinkPair& b) {
  if (!std::isfinite(b.left) || !std::isfinite(b.right)) throw DataError("blink: non-finite value");
  if (b.left < 0 || b.right < 0) throw DataError("blink: negative ratio");
}

void LandmarkSet::validate() const {
  for (const auto& p : points) {
    if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw ConfigError("landmarks: non-finite coordinate");
  }
  std::set<int> seen;
  for (const auto& [name, idx] : groups) {
    for (int i : idx) {
      if (i < 0 || i >= static_cast<int>(points.size())) {
        throw ConfigError("landmarks: group '" + name + "' index out of range");
      }
      if (!seen.insert(i).second) throw ConfigError("landmarks: groups overlap at index " + std::to_string(i));
    }
  }
}

std::vector<Point2> LandmarkSet::group_points(const std::string& name) const {
  auto it = groups.find(name);
  if (it == groups.end()) throw ConfigError("landmarks: no group '" + name + "'");
  std::vector<Point2> out;
  for (int i : it->second) out.push_back(points.at(static_cast<std::size_t>(i)));
  return out;
}

std::vector<double> LandmarkSet::flat() const {
  std::vector<double> v;
  v.reserve(points.size() * 2);
  for (const auto& p : points) {
    v.push_back(p.x);
    v.push_back(p.y);
  }
  return v;
}

LandmarkSet LandmarkSet::from_flat(const std::vector<double>& xy, IndexGroups groups) {
  if (xy.size() % 2 != 0) throw ConfigError("landmarks: odd flat length");
  LandmarkSet l;
  l.groups = std::move(groups);
  for (std::size_t i = 0; i < xy.size(); i += 2) l.points.push_back({xy[i], xy[i + 1]});
  return l;
}

double group_vertical_extent(const LandmarkSet& l, const std::string& group) {
  auto pts = l.group_points(group);
  if (pts.empty()) return 0.0;
  auto [lo, hi] = std::minmax_element(pts.begin(), pts.end(), [](auto& a, auto& b) { return a.y < b.y; });
  return hi->y - lo->y;
}

nlohmann::json to_json(const LandmarkSet& l) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : l.points) pts.push_back({p.x, p.y});
  return {{"version", 1}, {"points", pts}, {"groups", l.groups}};
}

LandmarkSet landmarks_from_json(const nlohmann::json& j) {
  LandmarkSet l;
  const auto& pts = j.contains("points") ? j.at("points") : j.at("landmarks");
  for (const auto& p : pts) {
    if (!p.is_array() || p.size() != 2) throw ConfigError("landmarks json: each point must be [x, y]");
    l.points.push_back({p[0].get<double>(), p[1].get<double>()});
  }
  if (j.contains("groups")) l.groups = j.at("groups").get<IndexGroups>();
  l.validate();
  return l;
}

}  // namespace apb
