#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "objslam/config.h"
#include "objslam/database.h"
#include "objslam/descriptor.h"
#include "objslam/random.h"
#include "objslam/recognition.h"
#include "objslam/vocabulary.h"

namespace objslam {

// Hierarchy of binary prototypes. Descriptors drawn from it cluster the way
// real ORB descriptors do, so a vocabulary trained on one sample quantizes
// another consistently.
class DescriptorWorld {
 public:
  DescriptorWorld(uint64_t seed, int branching, int depth);

  int branching() const { return branching_; }
  int depth() const { return depth_; }
  // Bits flipped from a parent to its child at `level` (level >= 2).
  static int level_flips(int level);
  static constexpr int kLeafFlips = 12;

  // path[i] in [0, branching) is the child taken at level i + 1.
  BinaryDescriptor prototype(const std::vector<int>& path);
  std::vector<int> random_leaf(Random& rng) const;
  // A random leaf prototype with kLeafFlips bits flipped.
  BinaryDescriptor sample(Random& rng);

 private:
  uint64_t seed_;
  int branching_;
  int depth_;
  std::map<std::vector<int>, BinaryDescriptor> cache_;
};

struct SceneInstance {
  int id = -1;
  uint32_t model_id = 0;
  Pose world_pose;  // T_WO, meters
};

struct TrackObservation {
  uint32_t landmark = 0;
  PixelPoint pixel;
  int level = 0;
};

// Background landmarks followed by the front-end tracker in one frame.
struct FrameTracks {
  uint32_t frame_id = 0;
  std::vector<TrackObservation> observations;
};

struct GtCorrespondence {
  uint32_t feature = 0;
  int instance = -1;
  uint32_t model_point = 0;
};

struct GroundTruth {
  Trajectory trajectory;  // T_WC, meters
  std::vector<SceneInstance> instances;
  double true_scale = 1.0;  // map units per meter
  std::map<uint32_t, std::vector<GtCorrespondence>> correspondences;  // by frame id
};

struct Scene {
  Config config;
  TrainingSet corpus;
  std::vector<RawModel> models;
  std::vector<Frame> frames;  // camera_pose is the front-end estimate in map units
  std::vector<FrameTracks> tracks;
  GroundTruth truth;
};

// Deterministic per seed. Throws InvalidArgument on an invalid config.
Scene generate_scene(const Config& config);

// Scene directory: config.txt, corpus.txt, models/model_NNNN.txt, frames.txt,
// tracks.txt, groundtruth.txt, gt_objects.txt, gt_correspondences.txt, scene_info.txt.
void write_scene(const std::string& dir, const Scene& scene);
std::vector<std::string> model_files(const std::string& dir);

std::string format_tracks(const std::vector<FrameTracks>& tracks);
std::vector<FrameTracks> parse_tracks(const std::string& text);
std::vector<FrameTracks> read_tracks(const std::string& path);

std::string format_ground_truth_objects(const std::vector<SceneInstance>& instances);
std::string format_gt_correspondences(const std::map<uint32_t, std::vector<GtCorrespondence>>& corrs);
GroundTruth read_ground_truth(const std::string& dir);

// Camera looking from `center` at `target`, z forward, world z up.
Pose look_at(const Vec3& center, const Vec3& target);

// A detection of `model` that does not exist: random T_CO, matches built by
// projecting the model through it.
Observation make_spurious_observation(const ObjectModel& model, const Frame& frame, const CameraIntrinsics& k,
                                      Random& rng);

}  // namespace objslam
