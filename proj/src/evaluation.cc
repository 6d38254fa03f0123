#include "objslam/evaluation.h"

#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numbers>

#include "objslam/errors.h"

namespace objslam {

namespace {

constexpr double kDeg = 180.0 / std::numbers::pi;

const StampedPose* find_stamp(const Trajectory& traj, double t, double tol) {
  const StampedPose* best = nullptr;
  double best_dt = tol;
  for (const auto& sp : traj) {
    const double dt = std::abs(sp.timestamp - t);
    if (dt <= best_dt) {
      best_dt = dt;
      best = &sp;
    }
  }
  return best;
}

}  // namespace

std::pair<double, double> circular_stats_deg(std::span<const double> angles_deg) {
  if (angles_deg.empty()) return {0.0, 0.0};
  double s = 0.0, c = 0.0;
  for (double a : angles_deg) {
    s += std::sin(a / kDeg);
    c += std::cos(a / kDeg);
  }
  s /= static_cast<double>(angles_deg.size());
  c /= static_cast<double>(angles_deg.size());
  const double r = std::min(1.0, std::hypot(s, c));
  const double mean = std::atan2(s, c) * kDeg;
  const double sd = r > 0.0 ? std::sqrt(std::max(0.0, -2.0 * std::log(r))) * kDeg : 0.0;
  return {mean, sd};
}

std::pair<double, double> relative_pose_error(const std::vector<Pose>& estimate, const std::vector<Pose>& truth) {
  if (estimate.size() != truth.size()) throw InvalidArgument("relative_pose_error: size mismatch");
  double t_sum = 0.0, r_sum = 0.0;
  size_t n = 0;
  for (size_t i = 0; i < estimate.size(); ++i) {
    const Pose ei = estimate[i].inverse();
    const Pose gi = truth[i].inverse();
    for (size_t j = i + 1; j < estimate.size(); ++j) {
      const Pose err = (gi * truth[j]).inverse() * (ei * estimate[j]);
      t_sum += err.translation.norm();
      r_sum += rotation_angle_deg(err.rotation);
      ++n;
    }
  }
  if (n == 0) return {0.0, 0.0};
  return {t_sum / static_cast<double>(n), r_sum / static_cast<double>(n)};
}

EvalReport evaluate(const MapDump& map, std::span<const DetectionRecord> detections, const GroundTruth& gt,
                    const EvalOptions& options) {
  EvalReport rep;
  rep.true_scale = gt.true_scale;
  rep.keyframes = map.keyframes.size();

  std::vector<Vec3> est_pos, gt_pos;
  std::vector<Pose> est_poses, gt_poses;
  for (const auto& kf : map.keyframes) {
    const StampedPose* g = find_stamp(gt.trajectory, kf.timestamp, options.timestamp_tolerance);
    if (!g) throw Error("evaluate: no ground truth for keyframe at t = " + std::to_string(kf.timestamp));
    est_pos.push_back(kf.pose.translation);
    gt_pos.push_back(g->pose.translation);
    est_poses.push_back(kf.pose);
    gt_poses.push_back(g->pose);
  }
  // Ground truth expressed in the map frame; identity metric-to-map when the
  // trajectory is too short to align.
  Similarity sim;
  sim.scale = gt.true_scale;
  if (est_pos.size() >= 3) {
    sim = horn_align(std::span<const Vec3>(gt_pos), std::span<const Vec3>(est_pos), true);
  }
  std::vector<Pose> gt_in_map;
  std::vector<double> rot_errors;
  double sq = 0.0;
  for (size_t i = 0; i < est_poses.size(); ++i) {
    const Pose g{sim.rotation * gt_poses[i].rotation, sim * gt_poses[i].translation};
    gt_in_map.push_back(g);
    sq += (est_poses[i].translation - g.translation).squaredNorm();
    rot_errors.push_back(rotation_angle_deg(g.rotation.transpose() * est_poses[i].rotation));
    for (size_t j = 0; j < i; ++j) {
      rep.trajectory_extent = std::max(rep.trajectory_extent, (est_pos[i] - est_pos[j]).norm());
    }
  }
  if (!est_poses.empty()) rep.ate_rmse = std::sqrt(sq / static_cast<double>(est_poses.size()));
  std::tie(rep.ate_rotation_mean_deg, rep.ate_rotation_std_deg) = circular_stats_deg(rot_errors);
  std::tie(rep.rpe_translation, rep.rpe_rotation_deg) = relative_pose_error(est_poses, gt_in_map);
  rep.rpe_pairs = est_poses.size() * (est_poses.size() - (est_poses.empty() ? 0 : 1)) / 2;

  rep.scale = map.scale;
  rep.map_units_per_meter = sim.scale;
  if (map.scale) {
    rep.scale_error = std::abs(*map.scale * gt.true_scale - 1.0);
    rep.aligned_scale_error = std::abs(*map.scale * sim.scale - 1.0);
  }

  // Estimated objects are metric in a map-oriented frame; bring them into the ground-truth frame.
  std::vector<bool> gt_taken(gt.instances.size(), false);
  for (const auto& o : map.objects) {
    InstanceError e;
    e.instance_id = o.instance_id;
    e.model_id = o.model_id;
    const double s = map.scale.value_or(1.0 / gt.true_scale);
    const Vec3 in_map = o.world_pose.translation / s;
    const Vec3 in_gt = sim.rotation.transpose() * (in_map - sim.translation) / sim.scale;
    const Mat3 r_gt = sim.rotation.transpose() * o.world_pose.rotation;
    double best = options.instance_match_distance;
    for (size_t g = 0; g < gt.instances.size(); ++g) {
      if (gt_taken[g] || gt.instances[g].model_id != o.model_id) continue;
      const double d = (gt.instances[g].world_pose.translation - in_gt).norm();
      if (d < best) {
        best = d;
        e.gt_instance = static_cast<int>(g);
      }
    }
    if (e.gt_instance >= 0) {
      const SceneInstance& g = gt.instances[e.gt_instance];
      gt_taken[e.gt_instance] = true;
      e.gt_instance = g.id;
      e.translation_error = best;
      e.rotation_error_deg = rotation_angle_deg(g.world_pose.rotation.transpose() * r_gt);
    } else {
      ++rep.false_instances;
    }
    rep.instances.push_back(e);
  }

  // Ground-truth detections: instances with enough visible points in a frame.
  std::map<uint32_t, std::vector<int>> gt_dets;
  for (const auto& [frame, corrs] : gt.correspondences) {
    std::map<int, size_t> count;
    for (const auto& c : corrs) ++count[c.instance];
    for (const auto& [inst, n] : count) {
      if (n >= options.min_gt_correspondences) {
        gt_dets[frame].push_back(inst);
        ++rep.gt_detections;
      }
    }
  }
  std::map<int, const SceneInstance*> gt_by_id;
  for (const auto& g : gt.instances) gt_by_id[g.id] = &g;
  std::map<uint32_t, std::vector<bool>> used;
  for (const auto& [frame, list] : gt_dets) used[frame].assign(list.size(), false);
  rep.detections = detections.size();
  for (const auto& d : detections) {
    const auto it = gt_dets.find(d.frame_id);
    if (it == gt_dets.end()) continue;
    if (d.frame_id >= gt.trajectory.size()) throw Error("evaluate: detection frame outside ground truth");
    const Pose cw = gt.trajectory[d.frame_id].pose.inverse();
    int best = -1;
    double best_err = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < it->second.size(); ++i) {
      if (used[d.frame_id][i]) continue;
      const SceneInstance& g = *gt_by_id.at(it->second[i]);
      if (g.model_id != d.model_id) continue;
      const Pose co = cw * g.world_pose;
      const double t_err = (co.translation - d.object_in_camera.translation).norm();
      const double r_err = rotation_angle_deg(co.rotation.transpose() * d.object_in_camera.rotation);
      if (t_err < options.detection_depth_ratio * co.translation.z() && r_err < options.detection_rotation_deg &&
          t_err < best_err) {
        best_err = t_err;
        best = static_cast<int>(i);
      }
    }
    if (best >= 0) {
      used[d.frame_id][best] = true;
      ++rep.true_positives;
    }
  }
  if (rep.gt_detections > 0) {
    rep.recall = static_cast<double>(rep.true_positives) / static_cast<double>(rep.gt_detections);
  }
  if (rep.detections > 0) {
    rep.precision = static_cast<double>(rep.true_positives) / static_cast<double>(rep.detections);
  }
  return rep;
}

EvalReport evaluate(const MapState& map, std::span<const DetectionRecord> detections, const GroundTruth& gt,
                    const EvalOptions& options) {
  return evaluate(parse_map(format_map(map)), detections, gt, options);
}

std::string format_report(const EvalReport& r) {
  std::string out;
  char buf[256];
  auto line = [&](const char* fmt, auto... args) {
    std::snprintf(buf, sizeof(buf), fmt, args...);
    out += buf;
  };
  out += "# trajectory errors in map units after similarity alignment of ground truth onto keyframes\n";
  out += "# scale_error = |s * true_scale - 1|, with s converting map units to meters\n";
  line("keyframes %zu\n", r.keyframes);
  line("trajectory_extent %.9f\n", r.trajectory_extent);
  line("ate_rmse %.9f\n", r.ate_rmse);
  line("ate_rotation_mean_deg %.9f\n", r.ate_rotation_mean_deg);
  line("ate_rotation_std_deg %.9f\n", r.ate_rotation_std_deg);
  line("rpe_pairs %zu\n", r.rpe_pairs);
  line("rpe_translation %.9f\n", r.rpe_translation);
  line("rpe_rotation_deg %.9f\n", r.rpe_rotation_deg);
  line("true_scale %.9f\n", r.true_scale);
  if (r.scale) {
    line("scale %.9f\n", *r.scale);
    line("scale_error %.9f\n", *r.scale_error);
    line("map_units_per_meter %.9f\n", r.map_units_per_meter);
    line("aligned_scale_error %.9f\n", *r.aligned_scale_error);
  } else {
    out += "scale unset\nscale_error unset\n";
    line("map_units_per_meter %.9f\n", r.map_units_per_meter);
    out += "aligned_scale_error unset\n";
  }
  line("instances %zu\n", r.instances.size());
  line("false_instances %zu\n", r.false_instances);
  for (const auto& e : r.instances) {
    line("instance %d model %u gt %d translation_error %.9f rotation_error_deg %.9f\n", e.instance_id, e.model_id,
         e.gt_instance, e.translation_error, e.rotation_error_deg);
  }
  line("gt_detections %zu\n", r.gt_detections);
  line("detections %zu\n", r.detections);
  line("true_positives %zu\n", r.true_positives);
  line("recall %.9f\n", r.recall);
  line("precision %.9f\n", r.precision);
  return out;
}

}  // namespace objslam
