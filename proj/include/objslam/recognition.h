#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "objslam/database.h"
#include "objslam/descriptor.h"
#include "objslam/geometry.h"
#include "objslam/random.h"
#include "objslam/timing.h"
#include "objslam/vocabulary.h"

namespace objslam {

struct FrameFeature {
  PixelPoint pixel;
  BinaryDescriptor descriptor;
  int level = 0;
  NodePath path;
};

struct Frame {
  uint32_t id = 0;
  double timestamp = 0.0;
  Pose camera_pose;  // T_WC, map units
  std::vector<FrameFeature> features;
};

// "frame <id> <timestamp> [tx ty tz qx qy qz qw]" blocks (front-end T_WC in map
// units), each followed by "u v level <hex>" lines.
std::vector<Frame> read_frames(const std::string& path);
std::vector<Frame> parse_frames(const std::string& text);
std::string format_frames(std::span<const Frame> frames);
void write_frames(const std::string& path, std::span<const Frame> frames);

void quantize_frame(Frame& frame, const VocabularyTree& vocab);

struct Region {
  int id = 0;
  std::vector<uint32_t> members;
  Vec2 centroid = Vec2::Zero();
};

// Quick-shift on 2-D positions. Regions are ordered by their lowest member.
std::vector<Region> quick_shift_regions(std::span<const PixelPoint> points, double bandwidth_px,
                                        double max_link_factor = 3.0);

struct RecognitionParams {
  double bandwidth_px = 40.0;
  double max_link_factor = 3.0;
  int top_n = 10;
  int max_hamming = 50;
  double mu_e = 3.0;
  int disac_iterations = 50;
  double confidence = 0.99;
  double refine_radius_px = 3.0;
  double prior_search_radius_px = 40.0;
  int min_inliers = 4;
  // Minimum s_DISAC expressed in units of mu_e (4/3 means a 2 px mean residual over 4 points).
  double min_score_factor = 4.0 / 3.0;
  int retrieval_rounds = 3;
  // A same-model detection with at least half its matches inside an accepted
  // detection's matched-pixel box (grown by this margin) is dropped.
  double duplicate_margin_px = 10.0;
  double prior_staleness_s = 2.0;
  uint64_t seed = 0;
};

struct ObservationMatch {
  uint32_t point = 0;    // model point index
  uint32_t feature = 0;  // frame feature index
  PixelPoint pixel;
  int level = 0;
  int distance = 0;
};

// One verified recognition of a model in a frame.
struct Observation {
  uint32_t frame_id = 0;
  double timestamp = 0.0;
  Pose camera_pose;  // T_WC, map units
  uint32_t model_id = 0;
  int instance_hint = -1;
  Pose object_in_camera;  // T_CO, metric
  std::vector<ObservationMatch> matches;
  double score = 0.0;
  bool from_prior = false;
};

enum class PriorSource { kInMap, kScaledRecent, kUnscaledRecent };

struct PriorPose {
  int instance_id = -1;
  uint32_t model_id = 0;
  Pose object_in_camera;  // expected T_CO
  PriorSource source = PriorSource::kInMap;
};

// What recognition needs to know about one instance to predict it.
struct InstancePriorState {
  int instance_id = -1;
  uint32_t model_id = 0;
  std::optional<Pose> world_pose;  // T_WO, metric, set once triangulated
  bool has_last = false;
  Pose last_camera_pose;  // T_WCj, map units
  Pose last_object_in_camera;  // T_CjO
  double last_timestamp = 0.0;
};

// Camera poses are in map units; `scale` converts them to meters.
std::optional<PriorPose> compute_prior_pose(const InstancePriorState& instance,
                                            const Pose& camera_pose, double timestamp,
                                            std::optional<double> scale,
                                            double staleness_s = 2.0);

// Sum over correspondences of max(0, mu_e - reprojection error).
double s_disac(const Pose& object_in_camera, std::span<const Correspondence2D3D> corrs,
               const CameraIntrinsics& k, double mu_e = 3.0);

bool accept_detection(double score, size_t n_inliers, const RecognitionParams& params);

// First-draw probabilities P(c_j) = (1/h_j) / sum(1/h_k), with h = max(distance, 1).
std::vector<double> disac_probabilities(std::span<const int> distances);

// Four distinct indices drawn without replacement, each draw weighted by 1/h.
std::array<size_t, 4> disac_sample(std::span<const int> distances, Random& rng);

struct PoseHypothesis {
  Pose pose;
  std::vector<size_t> inliers;
  double score = 0.0;
  int iterations = 0;
};

std::optional<PoseHypothesis> disac_verify(std::span<const Correspondence2D3D> corrs,
                                           std::span<const int> distances,
                                           const CameraIntrinsics& k, Random& rng,
                                           int max_iterations = 50, double mu_e = 3.0,
                                           double confidence = 0.99);

// Baseline with the same budget: 4-subsets of the distance-sorted list taken
// in colexicographic order (the fixed PROSAC ordering, no randomness).
std::optional<PoseHypothesis> ordered_subset_verify(std::span<const Correspondence2D3D> corrs,
                                                    std::span<const int> distances,
                                                    const CameraIntrinsics& k,
                                                    int max_iterations = 50, double mu_e = 3.0);

struct RefineResult {
  Pose pose;
  std::vector<ObservationMatch> matches;
  double score = 0.0;
};

// Guided matching around projected model points (within `radius_px` on both
// axes) followed by a re-solve. `available` masks frame features that may be used.
std::vector<ObservationMatch> guided_matches(const Pose& object_in_camera, const ObjectModel& model,
                                             const Frame& frame, const std::vector<bool>& available,
                                             const CameraIntrinsics& k, double radius_px,
                                             int max_hamming);

// Never returns a score below the score of `initial` over `initial_matches`.
RefineResult refine_pose(const Pose& initial, std::span<const ObservationMatch> initial_matches,
                         const ObjectModel& model, const Frame& frame,
                         const std::vector<bool>& available, const CameraIntrinsics& k,
                         const RecognitionParams& params);

struct PriorDetections {
  std::vector<Observation> observations;
  std::vector<uint32_t> consumed;
};

PriorDetections detect_with_priors(const Frame& frame, std::span<const PriorPose> priors,
                                   const ObjectDatabase& db, const CameraIntrinsics& k,
                                   const RecognitionParams& params, std::vector<bool>& available,
                                   StageClock* clock = nullptr);

struct ModelCorrespondences {
  uint32_t model_id = 0;
  std::vector<DirectMatch> matches;  // feature = frame feature index
};

// Per-model union of region-level correspondences, ordered by model id.
std::vector<ModelCorrespondences> general_retrieval(const Frame& frame,
                                                    const std::vector<bool>& available,
                                                    const ObjectDatabase& db,
                                                    const RecognitionParams& params,
                                                    StageClock* clock = nullptr);

struct FrameRecognition {
  std::vector<Observation> observations;
  size_t prior_detections = 0;
};

FrameRecognition recognize_frame(const Frame& frame, std::span<const PriorPose> priors,
                                 const ObjectDatabase& db, const CameraIntrinsics& k,
                                 const RecognitionParams& params, StageClock* clock = nullptr);

struct DetectionRecord {
  uint32_t frame_id = 0;
  uint32_t model_id = 0;
  int instance_id = -1;
  double score = 0.0;
  Pose object_in_camera;
  size_t n_corrs = 0;
};

std::string format_detections(std::span<const DetectionRecord> records);
std::vector<DetectionRecord> parse_detections(const std::string& text);

}  // namespace objslam
