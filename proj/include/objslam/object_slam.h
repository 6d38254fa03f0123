#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "objslam/database.h"
#include "objslam/geometry.h"
#include "objslam/map.h"
#include "objslam/recognition.h"

namespace objslam {

struct ObjectSlamParams {
  double overlap_radius_factor = 0.5;  // of the model bounding-sphere radius
  double accumulate_parallax_deg = 3.0;
  double triangulation_parallax_deg = 3.0;
  int min_triangulation_points = 5;
  double min_ray_conditioning = 1e-3;
  double collinearity_ratio = 0.01;  // RMS distance to best-fit line over extent
  double mu_e = 3.0;
  // Model-consistency gate on the first triangulation of an instance.
  double max_shape_residual = 0.1;  // RMS residual of the similarity fit over model diameter
  double max_rotation_disagreement_deg = 10.0;
  double max_scale_disagreement = 0.3;  // relative, against an existing map scale
  // Later anchors must align with the current object pose within this many model diameters.
  double max_anchor_alignment = 0.1;
  double staleness_s = 2.0;
};

// T_WO = [R_WC R_CO | R_WC t_CO + s t_WC]: metric object pose from one observation.
Pose object_pose_prior(const Observation& obs, double scale);

// Finds or creates the instance an observation belongs to.
int associate_observation(MapState& map, const Observation& obs, const ObjectDatabase& db,
                          const ObjectSlamParams& params);

// Keeps the correspondences that bring a new model point or enough parallax.
// Returns false (and leaves the instance untouched) when nothing is kept.
bool accumulate(ObjectInstance& instance, const Observation& obs, const MapState& map,
                const CameraIntrinsics& k, const ObjectSlamParams& params);

struct AnchorCandidate {
  uint32_t model_point = 0;
  Vec3 object_point = Vec3::Zero();
  Vec3 world_point = Vec3::Zero();
};

struct TriangulationResult {
  std::vector<AnchorCandidate> anchors;
  std::vector<uint32_t> frames;  // observations that contributed rays
  std::optional<double> scale_estimate;  // set on the first triangulation
  std::optional<Pose> world_pose;  // set on the first triangulation
};

std::optional<TriangulationResult> try_triangulate(const MapState& map, const ObjectInstance& instance,
                                                   const ObjectModel& model, const CameraIntrinsics& k,
                                                   const ObjectSlamParams& params);

// Adds anchors, promotes contributing frames to semantic keyframes and adds
// their anchor measurements. Returns ids of keyframes created by this call.
std::vector<uint32_t> insert_triangulation(MapState& map, ObjectInstance& instance,
                                           const TriangulationResult& result);

struct AnchorObservation {
  Vec3 object_point;  // x_O
  Vec3 world_point;  // x_W, map units
};

struct ScaleView {
  Pose camera_pose;  // T_WC, map units
  Pose object_in_camera;  // T_CO, metric
  std::vector<AnchorObservation> anchors;
};

// argmin_s sum || s R_WC^T (x_W - t_WC) - (R_CO x_O + t_CO) ||^2 in closed form.
double estimate_instance_scale(std::span<const ScaleView> views);
double instance_scale_residual(std::span<const ScaleView> views, double scale);

InstancePriorState prior_state(const ObjectInstance& instance);

}  // namespace objslam
