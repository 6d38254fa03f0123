#include "objslam/map.h"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "objslam/binary_io.h"
#include "objslam/errors.h"

namespace objslam {

bool Keyframe::observes(uint32_t point_id) const {
  return std::any_of(measurements.begin(), measurements.end(),
                     [&](const KeyframeMeasurement& m) { return m.point_id == point_id; });
}

uint32_t MapState::add_point(MapPoint point) {
  point.id = next_point_id++;
  const uint32_t id = point.id;
  points.emplace(id, std::move(point));
  return id;
}

Keyframe& MapState::ensure_keyframe(uint32_t frame_id, double timestamp, const Pose& camera_pose) {
  auto it = keyframes.find(frame_id);
  if (it == keyframes.end()) {
    Keyframe kf;
    kf.id = frame_id;
    kf.timestamp = timestamp;
    kf.camera_pose = camera_pose;
    it = keyframes.emplace(frame_id, std::move(kf)).first;
  }
  return it->second;
}

std::optional<uint32_t> MapState::first_keyframe() const {
  if (keyframes.empty()) return std::nullopt;
  return keyframes.begin()->first;
}

void MapState::check_consistency() const {
  if (scale && !(*scale > 0.0)) throw InvalidArgument("map scale must be positive");
  for (const auto& [id, kf] : keyframes) {
    for (const auto& m : kf.measurements) {
      if (!points.count(m.point_id)) throw InvalidArgument("keyframe references a missing point");
    }
  }
  for (const auto& [id, p] : points) {
    if (p.anchor && !instances.count(p.instance_id)) {
      throw InvalidArgument("anchor references a missing instance");
    }
  }
  for (const auto& [id, inst] : instances) {
    for (const auto& [mp, pid] : inst.anchors) {
      const auto it = points.find(pid);
      if (it == points.end() || !it->second.anchor || it->second.instance_id != id) {
        throw InvalidArgument("instance references a missing anchor");
      }
    }
  }
}

Pose metric_pose(const Pose& camera_pose, double scale) {
  return Pose{camera_pose.rotation, scale * camera_pose.translation};
}

std::string format_map(const MapState& map) {
  std::string out;
  char buf[320];
  out += "[keyframes]\n";
  for (const auto& [id, kf] : map.keyframes) {
    std::snprintf(buf, sizeof(buf), "%.6f ", kf.timestamp);
    out += buf;
    out += format_pose_tum(kf.camera_pose);
    out += kf.semantic ? " 1\n" : " 0\n";
  }
  out += "[points]\n";
  for (const auto& [id, p] : map.points) {
    if (p.anchor) continue;
    std::snprintf(buf, sizeof(buf), "%u %.9f %.9f %.9f\n", id, p.position.x(), p.position.y(),
                  p.position.z());
    out += buf;
  }
  out += "[anchors]\n";
  for (const auto& [iid, inst] : map.instances) {
    for (const auto& [mp, pid] : inst.anchors) {
      const MapPoint& p = map.points.at(pid);
      std::snprintf(buf, sizeof(buf), "%d %.9f %.9f %.9f %.9f %.9f %.9f\n", iid, p.object_point.x(),
                    p.object_point.y(), p.object_point.z(), p.position.x(), p.position.y(),
                    p.position.z());
      out += buf;
    }
  }
  out += "[objects]\n";
  for (const auto& [iid, inst] : map.instances) {
    if (!inst.world_pose) continue;
    std::snprintf(buf, sizeof(buf), "%d %u ", iid, inst.model_id);
    out += buf;
    out += format_pose_tum(*inst.world_pose);
    std::snprintf(buf, sizeof(buf), " %.9f\n", inst.scale_estimate.value_or(0.0));
    out += buf;
  }
  out += "[scale]\n";
  if (map.scale) {
    std::snprintf(buf, sizeof(buf), "%.9f\n", *map.scale);
    out += buf;
  }
  return out;
}

void write_map(const std::string& path, const MapState& map) { write_text_file(path, format_map(map)); }

MapDump parse_map(const std::string& text) {
  MapDump dump;
  std::istringstream in(text);
  std::string line, section;
  auto read_pose = [](std::istringstream& row) {
    Vec3 t;
    double qx, qy, qz, qw;
    if (!(row >> t.x() >> t.y() >> t.z() >> qx >> qy >> qz >> qw)) throw FormatError("map: bad pose");
    return Pose::from_quaternion(Eigen::Quaterniond(qw, qx, qy, qz), t);
  };
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (line[0] == '[') {
      section = line;
      continue;
    }
    std::istringstream row(line);
    if (section == "[keyframes]") {
      StampedPose sp;
      if (!(row >> sp.timestamp)) throw FormatError("map: bad keyframe line");
      sp.pose = read_pose(row);
      int semantic = 0;
      row >> semantic;
      dump.keyframes.push_back(sp);
      dump.semantic.push_back(semantic != 0);
    } else if (section == "[points]") {
      uint32_t id;
      Vec3 x;
      if (!(row >> id >> x.x() >> x.y() >> x.z())) throw FormatError("map: bad point line");
      dump.points[id] = x;
    } else if (section == "[anchors]") {
      MapDump::Anchor a;
      if (!(row >> a.instance_id >> a.object_point.x() >> a.object_point.y() >> a.object_point.z() >>
            a.world_point.x() >> a.world_point.y() >> a.world_point.z())) {
        throw FormatError("map: bad anchor line");
      }
      dump.anchors.push_back(a);
    } else if (section == "[objects]") {
      MapDump::Object o;
      if (!(row >> o.instance_id >> o.model_id)) throw FormatError("map: bad object line");
      o.world_pose = read_pose(row);
      if (!(row >> o.scale_estimate)) throw FormatError("map: bad object line");
      dump.objects.push_back(o);
    } else if (section == "[scale]") {
      double s;
      if (!(row >> s)) throw FormatError("map: bad scale line");
      dump.scale = s;
    } else {
      throw FormatError("map: content outside a section");
    }
  }
  return dump;
}

MapDump read_map(const std::string& path) { return parse_map(read_text_file(path)); }

}  // namespace objslam
