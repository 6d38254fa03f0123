#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "objslam/geometry.h"
#include "objslam/map.h"

namespace objslam {

// Huber influence on a squared weighted error: x below delta_sq, linear growth above.
double huber(double x, double delta_sq);

// Inverse variance of a keypoint detected at pyramid `level` (sigma^2 = 2^(2 level)).
double reprojection_information(int level);

// e = u - CamProj(T_WC^-1 x_W). Throws PointBehindCamera.
Vec2 reprojection_residual(const Pose& camera_pose, const Vec3& world_point, const PixelPoint& measured,
                           const CameraIntrinsics& k);

// a = x_O - s R_WO^T x_W + R_WO^T t_WO  (x_W in map units, x_O and T_WO metric).
Vec3 alignment_residual(const Pose& world_pose, double scale, const Vec3& object_point,
                        const Vec3& world_point);

// Derivatives of the reprojection residual with respect to a left increment of
// T_CW (rotation first) and to x_W.
struct ReprojectionJacobians {
  Eigen::Matrix<double, 2, 6> camera;
  Eigen::Matrix<double, 2, 3> point;
};
ReprojectionJacobians reprojection_jacobians(const Pose& camera_from_world, const Vec3& world_point,
                                             const CameraIntrinsics& k);

// Derivatives of the alignment residual with respect to a left increment of
// T_OW, to x_W and to log(s).
struct AlignmentJacobians {
  Eigen::Matrix<double, 3, 6> object;
  Eigen::Matrix3d point;
  Vec3 log_scale;
};
AlignmentJacobians alignment_jacobians(const Pose& object_from_world, double scale,
                                       const Vec3& world_point);

struct BaOptions {
  int max_iterations = 100;
  double initial_lambda = 1e-4;
  double relative_tolerance = 1e-9;
  double reprojection_delta_sq = 5.991;
  double alignment_delta_sq = 7.815;
  double alignment_sigma = 0.01;
  bool include_alignment = true;
};

struct BaReport {
  int iterations = 0;
  bool converged = false;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  std::vector<double> cost_history;  // objective after each accepted step
  size_t reprojection_terms = 0;
  size_t alignment_terms = 0;
  std::string message;
};

// Robust objective over every residual of the map (points behind a camera are skipped).
double robust_objective(const MapState& map, const CameraIntrinsics& k, const BaOptions& options);

// Cameras (except the lowest keyframe id), points, triangulated objects and,
// when an object is triangulated, the global scale.
BaReport joint_bundle_adjust(MapState& map, const CameraIntrinsics& k, const BaOptions& options = {});

// The new keyframe and its best-covisibility neighbours (ties to the more
// recent keyframe), with every point they see. Reprojection terms only.
std::vector<uint32_t> local_window(const MapState& map, uint32_t keyframe_id, int neighbours = 4);
BaReport local_bundle_adjust(MapState& map, uint32_t keyframe_id, const CameraIntrinsics& k,
                             BaOptions options = {.max_iterations = 20});

}  // namespace objslam
