#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "objslam/geometry.h"
#include "objslam/recognition.h"

namespace objslam {

struct KeyframeMeasurement {
  uint32_t point_id = 0;
  PixelPoint pixel;
  int level = 0;
};

struct Keyframe {
  uint32_t id = 0;  // id of the source frame
  double timestamp = 0.0;
  Pose camera_pose;  // T_WC, map units
  bool semantic = false;
  std::vector<KeyframeMeasurement> measurements;

  bool observes(uint32_t point_id) const;
};

// Map point in map units. Anchor points additionally carry their object-frame
// coordinates and are exempt from any point maintenance.
struct MapPoint {
  uint32_t id = 0;
  Vec3 position = Vec3::Zero();  // x_W
  bool anchor = false;
  int instance_id = -1;
  uint32_t model_point = 0;
  Vec3 object_point = Vec3::Zero();  // x_O, meters
};

struct ObjectInstance {
  int id = -1;
  uint32_t model_id = 0;
  // Accumulated observations, already filtered for parallax.
  std::vector<Observation> observations;
  std::optional<Pose> world_pose;  // T_WO, metric
  std::optional<double> scale_estimate;  // s_Ok
  std::map<uint32_t, uint32_t> anchors;  // model point -> map point id
  size_t observations_at_last_triangulation = 0;
  // Most recent verified detection, kept even when accumulation drops it.
  bool has_last = false;
  uint32_t last_frame = 0;
  double last_timestamp = 0.0;
  Pose last_camera_pose;
  Pose last_object_in_camera;

  bool triangulated() const { return world_pose.has_value(); }
};

struct MapState {
  std::map<uint32_t, Keyframe> keyframes;
  std::map<uint32_t, MapPoint> points;
  std::map<int, ObjectInstance> instances;
  std::optional<double> scale;  // metric = scale * map units
  uint32_t next_point_id = 0;
  int next_instance_id = 0;

  uint32_t add_point(MapPoint point);
  Keyframe& ensure_keyframe(uint32_t frame_id, double timestamp, const Pose& camera_pose);
  // Id of the gauge keyframe (lowest id), if any.
  std::optional<uint32_t> first_keyframe() const;

  // Throws InvalidArgument on dangling references.
  void check_consistency() const;
};

// Camera pose with its translation converted to meters.
Pose metric_pose(const Pose& camera_pose, double scale);

// Sections [keyframes], [points], [anchors], [objects], [scale], ordered by id.
std::string format_map(const MapState& map);
void write_map(const std::string& path, const MapState& map);

struct MapDump {
  Trajectory keyframes;
  std::vector<bool> semantic;
  std::map<uint32_t, Vec3> points;
  struct Anchor {
    int instance_id;
    Vec3 object_point;
    Vec3 world_point;
  };
  std::vector<Anchor> anchors;
  struct Object {
    int instance_id;
    uint32_t model_id;
    Pose world_pose;
    double scale_estimate;
  };
  std::vector<Object> objects;
  std::optional<double> scale;
};

MapDump parse_map(const std::string& text);
MapDump read_map(const std::string& path);

}  // namespace objslam
