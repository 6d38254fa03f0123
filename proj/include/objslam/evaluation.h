#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "objslam/geometry.h"
#include "objslam/map.h"
#include "objslam/recognition.h"
#include "objslam/scene.h"

namespace objslam {

struct EvalOptions {
  double timestamp_tolerance = 1e-4;
  double instance_match_distance = 0.15;  // meters
  size_t min_gt_correspondences = 8;  // a ground-truth detection needs this many visible points
  double detection_depth_ratio = 0.1;
  double detection_rotation_deg = 10.0;
};

struct InstanceError {
  int instance_id = -1;
  uint32_t model_id = 0;
  int gt_instance = -1;  // -1 for a false instance
  double translation_error = 0.0;  // meters
  double rotation_error_deg = 0.0;
};

struct EvalReport {
  size_t keyframes = 0;
  double ate_rmse = 0.0;  // map units
  double ate_rotation_mean_deg = 0.0;  // circular mean
  double ate_rotation_std_deg = 0.0;  // circular standard deviation
  size_t rpe_pairs = 0;
  double rpe_translation = 0.0;  // map units, mean over all keyframe pairs
  double rpe_rotation_deg = 0.0;
  double trajectory_extent = 0.0;  // map units
  std::optional<double> scale;
  double true_scale = 1.0;
  std::optional<double> scale_error;  // |s * s_true - 1|
  // Map units per meter from the trajectory alignment, and |s * that - 1|:
  // the scale error once drift of the map's own units is factored out.
  double map_units_per_meter = 0.0;
  std::optional<double> aligned_scale_error;
  std::vector<InstanceError> instances;
  size_t false_instances = 0;
  size_t gt_detections = 0;
  size_t detections = 0;
  size_t true_positives = 0;
  double recall = 1.0;
  double precision = 1.0;
  std::string timings;  // stage report, kept out of format_report
};

// Throws Error when a keyframe timestamp has no ground-truth pose.
EvalReport evaluate(const MapDump& map, std::span<const DetectionRecord> detections, const GroundTruth& gt,
                    const EvalOptions& options = {});
EvalReport evaluate(const MapState& map, std::span<const DetectionRecord> detections, const GroundTruth& gt,
                    const EvalOptions& options = {});

// Circular mean and standard deviation of angles, degrees.
std::pair<double, double> circular_stats_deg(std::span<const double> angles_deg);

// Mean translation and rotation error of relative motions over every pair i < j.
std::pair<double, double> relative_pose_error(const std::vector<Pose>& estimate, const std::vector<Pose>& truth);

// Deterministic text, timings excluded.
std::string format_report(const EvalReport& report);

}  // namespace objslam
