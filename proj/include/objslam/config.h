#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "objslam/bundle_adjustment.h"
#include "objslam/geometry.h"
#include "objslam/object_slam.h"
#include "objslam/recognition.h"

namespace objslam {

struct SceneConfig {
  uint64_t seed = 1;
  int num_models = 6;
  int points_per_model = 120;
  int descriptors_per_point = 3;
  double model_extent = 0.3;  // longest box side, meters
  int num_instances = 6;  // instance i uses model i % num_models
  double placement_radius = 0.5;  // instances sit on a ring about the origin
  // Camera path: an arc about the origin unless waypoints are given ("x,y,z;x,y,z;...").
  std::string waypoints;
  double trajectory_radius = 2.0;
  double trajectory_height = 0.8;
  double trajectory_arc_deg = 70.0;
  int num_frames = 200;
  double frame_rate = 10.0;
  int clutter_per_frame = 40;
  int descriptor_noise_bits = 5;
  double pixel_noise = 1.0;  // sigma at level 0
  double true_scale = 2.0;  // map units per meter
  double pose_noise_deg = 0.0;  // front-end pose prior noise
  double pose_noise_translation = 0.0;  // meters
  int landmarks = 300;  // background points tracked by the front end
  double landmark_radius = 4.0;
  // Descriptor world shared by the corpus and the models.
  int descriptor_branching = 32;
  int descriptor_depth = 3;
  int corpus_images = 200;
  int corpus_features = 500;
};

struct PipelineConfig {
  int keyframe_interval = 5;
  int min_detection_inliers = 6;
  double landmark_min_parallax_deg = 1.0;
  bool global_ba_on_insert = true;
  int local_ba_iterations = 20;
};

struct Config {
  CameraIntrinsics camera;
  SceneConfig scene;
  RecognitionParams recognition;
  ObjectSlamParams slam;
  BaOptions ba;
  PipelineConfig pipeline;

  // Throws InvalidArgument on inconsistent values.
  void validate() const;
};

// "key = value" lines, '#' starts a comment. Unknown keys throw FormatError.
Config parse_config(const std::string& text, const Config& base = {});
Config read_config(const std::string& path);
// Every key with its current value, in a fixed order.
std::string format_config(const Config& config);
std::vector<std::string> config_keys();

std::vector<Vec3> parse_waypoints(const std::string& text);

}  // namespace objslam
