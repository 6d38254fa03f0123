#include "objslam/object_slam.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include <Eigen/SVD>

#include "objslam/bundle_adjustment.h"
#include "objslam/errors.h"

namespace objslam {

namespace {

constexpr double kRadToDeg = 180.0 / M_PI;

Vec3 bearing(const Pose& camera_pose, const CameraIntrinsics& k, const PixelPoint& px) {
  return (camera_pose.rotation * unproject(k, px)).normalized();
}

double angle_deg(const Vec3& a, const Vec3& b) {
  return std::atan2(a.cross(b).norm(), a.dot(b)) * kRadToDeg;
}

const ObservationMatch* find_match(const Observation& obs, uint32_t model_point) {
  for (const auto& m : obs.matches) {
    if (m.point == model_point) return &m;
  }
  return nullptr;
}

Vec3 hypothesis_centroid(const ObjectInstance& inst, const ObjectModel& model, double scale) {
  if (inst.world_pose) return *inst.world_pose * model.centroid;
  Observation last;
  last.camera_pose = inst.last_camera_pose;
  last.object_in_camera = inst.last_object_in_camera;
  return object_pose_prior(last, scale) * model.centroid;
}

// RMS distance to the best-fit line against the largest pairwise distance.
bool collinear(const std::vector<Vec3>& pts, double ratio) {
  Vec3 mean = Vec3::Zero();
  for (const auto& p : pts) mean += p;
  mean /= static_cast<double>(pts.size());
  Eigen::MatrixXd centered(pts.size(), 3);
  for (size_t i = 0; i < pts.size(); ++i) centered.row(i) = (pts[i] - mean).transpose();
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered);
  const Vec3 sv = svd.singularValues();
  const double off_line = std::sqrt((sv(1) * sv(1) + sv(2) * sv(2)) / static_cast<double>(pts.size()));
  double extent = 0.0;
  for (size_t i = 0; i < pts.size(); ++i) {
    for (size_t j = i + 1; j < pts.size(); ++j) extent = std::max(extent, (pts[i] - pts[j]).norm());
  }
  return !(off_line > ratio * extent);
}

struct PointRays {
  std::vector<Ray> rays;
  std::vector<size_t> observations;  // index into instance.observations
};

}  // namespace

Pose object_pose_prior(const Observation& obs, double scale) {
  if (!(scale > 0.0)) throw InvalidArgument("object_pose_prior: scale must be positive");
  const Pose& wc = obs.camera_pose;
  const Pose& co = obs.object_in_camera;
  return Pose{wc.rotation * co.rotation, wc.rotation * co.translation + scale * wc.translation};
}

int associate_observation(MapState& map, const Observation& obs, const ObjectDatabase& db,
                          const ObjectSlamParams& params) {
  int chosen = -1;
  if (obs.instance_hint >= 0) {
    const auto it = map.instances.find(obs.instance_hint);
    if (it != map.instances.end() && it->second.model_id == obs.model_id) chosen = obs.instance_hint;
  }
  const ObjectModel& model = db.model(obs.model_id);
  if (chosen < 0 && map.scale) {
    const Vec3 c = object_pose_prior(obs, *map.scale) * model.centroid;
    double best = params.overlap_radius_factor * model.radius;
    for (const auto& [id, inst] : map.instances) {
      if (inst.model_id != obs.model_id || !inst.has_last) continue;
      const double d = (hypothesis_centroid(inst, model, *map.scale) - c).norm();
      if (d < best) {
        best = d;
        chosen = id;
      }
    }
  } else if (chosen < 0) {
    // Without scale, consecutive detections of a model are taken to be the
    // same object. Instances already seen in this frame are other copies.
    const Vec3 dir = (obs.camera_pose.rotation * (obs.object_in_camera * model.centroid)).normalized();
    double best_angle = std::numeric_limits<double>::infinity();
    double latest = -std::numeric_limits<double>::infinity();
    int most_recent = -1;
    for (const auto& [id, inst] : map.instances) {
      if (inst.model_id != obs.model_id || !inst.has_last) continue;
      if (inst.last_frame == obs.frame_id) continue;
      if (inst.last_timestamp > latest) {
        latest = inst.last_timestamp;
        most_recent = id;
      }
      if (obs.timestamp - inst.last_timestamp > params.staleness_s) continue;
      const Vec3 prev = (inst.last_camera_pose.rotation * (inst.last_object_in_camera * model.centroid))
                            .normalized();
      const double a = angle_deg(prev, dir);
      if (a < best_angle) {
        best_angle = a;
        chosen = id;
      }
    }
    if (chosen < 0) chosen = most_recent;
  }
  if (chosen < 0) {
    ObjectInstance inst;
    inst.id = map.next_instance_id++;
    inst.model_id = obs.model_id;
    chosen = inst.id;
    map.instances.emplace(chosen, std::move(inst));
  }
  ObjectInstance& inst = map.instances.at(chosen);
  inst.has_last = true;
  inst.last_frame = obs.frame_id;
  inst.last_timestamp = obs.timestamp;
  inst.last_camera_pose = obs.camera_pose;
  inst.last_object_in_camera = obs.object_in_camera;
  return chosen;
}

bool accumulate(ObjectInstance& instance, const Observation& obs, const MapState& map,
                const CameraIntrinsics& k, const ObjectSlamParams& params) {
  Observation kept = obs;
  kept.matches.clear();
  for (const auto& m : obs.matches) {
    const Vec3 center = obs.camera_pose.translation;
    std::optional<Vec3> anchored;
    if (const auto a = instance.anchors.find(m.point); a != instance.anchors.end()) {
      anchored = map.points.at(a->second).position;
    }
    const Vec3 dir = bearing(obs.camera_pose, k, m.pixel);
    double min_parallax = std::numeric_limits<double>::infinity();
    for (const auto& prev : instance.observations) {
      const ObservationMatch* pm = find_match(prev, m.point);
      if (!pm) continue;
      const double p = anchored ? parallax_deg(prev.camera_pose.translation, center, *anchored)
                                : angle_deg(bearing(prev.camera_pose, k, pm->pixel), dir);
      min_parallax = std::min(min_parallax, p);
    }
    // infinity when the point is new to this instance
    if (min_parallax >= params.accumulate_parallax_deg) kept.matches.push_back(m);
  }
  if (kept.matches.empty()) return false;
  instance.observations.push_back(std::move(kept));
  return true;
}

std::optional<TriangulationResult> try_triangulate(const MapState& map, const ObjectInstance& instance,
                                                   const ObjectModel& model, const CameraIntrinsics& k,
                                                   const ObjectSlamParams& params) {
  if (instance.triangulated() && instance.observations.size() == instance.observations_at_last_triangulation) {
    return std::nullopt;
  }
  std::map<uint32_t, PointRays> by_point;
  for (size_t i = 0; i < instance.observations.size(); ++i) {
    const Observation& obs = instance.observations[i];
    for (const auto& m : obs.matches) {
      if (instance.anchors.count(m.point)) continue;
      PointRays& pr = by_point[m.point];
      pr.rays.push_back(Ray{obs.camera_pose.translation, bearing(obs.camera_pose, k, m.pixel)});
      pr.observations.push_back(i);
    }
  }

  auto consistent_with = [&](const PointRays& pr, size_t r, uint32_t mp, const Vec3& x) {
    const Observation& obs = instance.observations[pr.observations[r]];
    const ObservationMatch* m = find_match(obs, mp);
    const Vec3 xc = obs.camera_pose.rotation.transpose() * (x - obs.camera_pose.translation);
    const auto px = try_project(k, xc);
    return px && (px->vec() - m->pixel.vec()).norm() < params.mu_e * std::ldexp(1.0, m->level);
  };
  // Triangulates from a ray subset and checks every gate on it.
  auto qualify = [&](const PointRays& pr, uint32_t mp, const std::vector<size_t>& subset) -> std::optional<Vec3> {
    if (subset.size() < 2) return std::nullopt;
    std::vector<Ray> rays;
    for (size_t r : subset) rays.push_back(pr.rays[r]);
    if (!(ray_conditioning(rays) > params.min_ray_conditioning)) return std::nullopt;
    Vec3 x;
    try {
      x = triangulate_point(rays);
    } catch (const Error&) {
      return std::nullopt;
    }
    double max_parallax = 0.0;
    for (size_t a = 0; a < rays.size(); ++a) {
      for (size_t b = a + 1; b < rays.size(); ++b) {
        max_parallax = std::max(max_parallax, parallax_deg(rays[a].origin, rays[b].origin, x));
      }
    }
    if (max_parallax < params.triangulation_parallax_deg) return std::nullopt;
    for (size_t r : subset) {
      if (!consistent_with(pr, r, mp, x)) return std::nullopt;
    }
    return x;
  };

  TriangulationResult result;
  std::set<size_t> contributing;
  std::map<uint32_t, std::vector<size_t>> used_rays;
  for (const auto& [mp, pr] : by_point) {
    if (pr.rays.size() < 2) continue;
    std::vector<size_t> subset(pr.rays.size());
    for (size_t r = 0; r < subset.size(); ++r) subset[r] = r;
    std::optional<Vec3> x = qualify(pr, mp, subset);
    if (!x) {
      // Largest set of rays agreeing with some two-view triangulation.
      std::vector<size_t> best;
      for (size_t a = 0; a < pr.rays.size(); ++a) {
        for (size_t b = a + 1; b < pr.rays.size(); ++b) {
          const Ray pair[2] = {pr.rays[a], pr.rays[b]};
          Vec3 guess;
          try {
            guess = triangulate_point(pair);
          } catch (const Error&) {
            continue;
          }
          std::vector<size_t> agree;
          for (size_t r = 0; r < pr.rays.size(); ++r) {
            if (consistent_with(pr, r, mp, guess)) agree.push_back(r);
          }
          if (agree.size() > best.size()) best = std::move(agree);
        }
      }
      x = qualify(pr, mp, best);
      subset = std::move(best);
    }
    if (!x) continue;
    result.anchors.push_back(AnchorCandidate{mp, model.points.at(mp), *x});
    for (size_t r : subset) contributing.insert(pr.observations[r]);
    used_rays[mp] = subset;
  }

  const double diameter = 2.0 * model.radius;
  if (!instance.triangulated()) {
    if (static_cast<int>(result.anchors.size()) < params.min_triangulation_points) return std::nullopt;
    std::vector<Vec3> xo, xw;
    for (const auto& a : result.anchors) {
      xo.push_back(a.object_point);
      xw.push_back(a.world_point);
    }
    if (collinear(xw, params.collinearity_ratio)) return std::nullopt;

    // The anchors must look like a similarity copy of the model.
    const Similarity fit = horn_align(std::span<const Vec3>(xo), std::span<const Vec3>(xw), true);
    if (!(fit.scale > 0.0)) return std::nullopt;
    double sq = 0.0;
    for (size_t i = 0; i < xo.size(); ++i) sq += (fit * xo[i] - xw[i]).squaredNorm();
    const double rms_metric = std::sqrt(sq / static_cast<double>(xo.size())) / fit.scale;
    if (!(rms_metric < params.max_shape_residual * diameter)) return std::nullopt;

    std::vector<ScaleView> views;
    for (size_t i : contributing) {
      const Observation& obs = instance.observations[i];
      const Mat3 r_wo = obs.camera_pose.rotation * obs.object_in_camera.rotation;
      if (rotation_angle_deg(r_wo.transpose() * fit.rotation) > params.max_rotation_disagreement_deg) {
        return std::nullopt;
      }
      ScaleView view{obs.camera_pose, obs.object_in_camera, {}};
      for (const auto& a : result.anchors) {
        if (find_match(obs, a.model_point)) view.anchors.push_back({a.object_point, a.world_point});
      }
      views.push_back(std::move(view));
    }
    double s_ok;
    try {
      s_ok = estimate_instance_scale(views);
    } catch (const Error&) {
      return std::nullopt;
    }
    if (!(s_ok > 0.0) || !std::isfinite(s_ok)) return std::nullopt;
    if (map.scale && std::abs(s_ok / *map.scale - 1.0) > params.max_scale_disagreement) return std::nullopt;
    result.scale_estimate = s_ok;
    result.world_pose = object_pose_prior(instance.observations.back(), map.scale.value_or(s_ok));
  } else {
    const double s = map.scale.value_or(1.0);
    std::vector<AnchorCandidate> aligned;
    contributing.clear();
    for (const auto& a : result.anchors) {
      const Vec3 r = alignment_residual(*instance.world_pose, s, a.object_point, a.world_point);
      if (r.norm() < params.max_anchor_alignment * diameter) aligned.push_back(a);
    }
    result.anchors = std::move(aligned);
    for (const auto& a : result.anchors) {
      const PointRays& pr = by_point.at(a.model_point);
      for (size_t r : used_rays.at(a.model_point)) contributing.insert(pr.observations[r]);
    }
    // New observations of existing anchors are propagated into keyframes that already exist.
    for (size_t i = instance.observations_at_last_triangulation; i < instance.observations.size(); ++i) {
      if (!map.keyframes.count(instance.observations[i].frame_id)) continue;
      for (const auto& m : instance.observations[i].matches) {
        if (instance.anchors.count(m.point)) {
          contributing.insert(i);
          break;
        }
      }
    }
    if (contributing.empty()) return std::nullopt;
  }
  for (size_t i : contributing) result.frames.push_back(instance.observations[i].frame_id);
  std::sort(result.frames.begin(), result.frames.end());
  result.frames.erase(std::unique(result.frames.begin(), result.frames.end()), result.frames.end());
  return result;
}

std::vector<uint32_t> insert_triangulation(MapState& map, ObjectInstance& instance,
                                           const TriangulationResult& result) {
  if (result.world_pose && !instance.world_pose) {
    instance.world_pose = *result.world_pose;
    instance.scale_estimate = result.scale_estimate;
    if (!map.scale) map.scale = result.scale_estimate;
  }
  for (const auto& a : result.anchors) {
    if (instance.anchors.count(a.model_point)) continue;
    MapPoint p;
    p.position = a.world_point;
    p.anchor = true;
    p.instance_id = instance.id;
    p.model_point = a.model_point;
    p.object_point = a.object_point;
    instance.anchors[a.model_point] = map.add_point(std::move(p));
  }
  std::vector<uint32_t> created;
  for (const auto& obs : instance.observations) {
    if (!std::binary_search(result.frames.begin(), result.frames.end(), obs.frame_id)) continue;
    if (!map.keyframes.count(obs.frame_id)) created.push_back(obs.frame_id);
    Keyframe& kf = map.ensure_keyframe(obs.frame_id, obs.timestamp, obs.camera_pose);
    for (const auto& m : obs.matches) {
      const auto a = instance.anchors.find(m.point);
      if (a == instance.anchors.end() || kf.observes(a->second)) continue;
      kf.measurements.push_back(KeyframeMeasurement{a->second, m.pixel, m.level});
      kf.semantic = true;
    }
  }
  instance.observations_at_last_triangulation = instance.observations.size();
  std::sort(created.begin(), created.end());
  created.erase(std::unique(created.begin(), created.end()), created.end());
  return created;
}

double estimate_instance_scale(std::span<const ScaleView> views) {
  size_t n = 0;
  bool moved = false;
  for (const auto& v : views) {
    n += v.anchors.size();
    if (v.camera_pose.translation.norm() > 0.0) moved = true;
  }
  if (n == 0) throw InvalidArgument("estimate_instance_scale: no anchor pairs");
  if (!moved) throw DegenerateGeometry("estimate_instance_scale: all cameras at the origin");
  double num = 0.0, den = 0.0;
  for (const auto& v : views) {
    const Mat3 r_cw = v.camera_pose.rotation.transpose();
    for (const auto& a : v.anchors) {
      const Vec3 in_map = r_cw * (a.world_point - v.camera_pose.translation);
      const Vec3 metric = v.object_in_camera.rotation * a.object_point + v.object_in_camera.translation;
      num += in_map.dot(metric);
      den += in_map.dot(in_map);
    }
  }
  if (!(den > 1e-300)) throw DegenerateGeometry("estimate_instance_scale: scale unobservable");
  return num / den;
}

double instance_scale_residual(std::span<const ScaleView> views, double scale) {
  double sum = 0.0;
  for (const auto& v : views) {
    const Mat3 r_cw = v.camera_pose.rotation.transpose();
    for (const auto& a : v.anchors) {
      const Vec3 in_map = r_cw * (a.world_point - v.camera_pose.translation);
      const Vec3 metric = v.object_in_camera.rotation * a.object_point + v.object_in_camera.translation;
      sum += (scale * in_map - metric).squaredNorm();
    }
  }
  return sum;
}

InstancePriorState prior_state(const ObjectInstance& instance) {
  InstancePriorState s;
  s.instance_id = instance.id;
  s.model_id = instance.model_id;
  s.world_pose = instance.world_pose;
  s.has_last = instance.has_last;
  s.last_camera_pose = instance.last_camera_pose;
  s.last_object_in_camera = instance.last_object_in_camera;
  s.last_timestamp = instance.last_timestamp;
  return s;
}

}  // namespace objslam
