#include "objslam/pipeline.h"

#include <algorithm>
#include <filesystem>
#include <map>

#include "objslam/binary_io.h"
#include "objslam/bundle_adjustment.h"
#include "objslam/errors.h"
#include "objslam/object_slam.h"

namespace objslam {

namespace {

// Background points seen by keyframes but not yet triangulated.
class LandmarkTracker {
 public:
  LandmarkTracker(const std::vector<FrameTracks>& tracks, const CameraIntrinsics& k, const Config& config)
      : k_(k), config_(config) {
    for (const auto& t : tracks) by_frame_[t.frame_id] = &t;
  }

  // Adds the tracked measurements of a keyframe and triangulates landmarks
  // that now have enough views.
  void add_keyframe(MapState& map, uint32_t kf_id) {
    const auto it = by_frame_.find(kf_id);
    if (it == by_frame_.end()) return;
    Keyframe& kf = map.keyframes.at(kf_id);
    for (const auto& o : it->second->observations) {
      if (const auto p = point_of_.find(o.landmark); p != point_of_.end()) {
        if (!kf.observes(p->second)) kf.measurements.push_back({p->second, o.pixel, o.level});
        continue;
      }
      auto& views = pending_[o.landmark];
      if (std::none_of(views.begin(), views.end(), [&](const auto& v) { return v.first == kf_id; })) {
        views.emplace_back(kf_id, o);
      }
      if (views.size() >= 2) try_create(map, o.landmark);
    }
  }

 private:
  void try_create(MapState& map, uint32_t landmark) {
    auto& views = pending_.at(landmark);
    std::vector<Ray> rays;
    for (const auto& [kid, o] : views) {
      const Pose& pose = map.keyframes.at(kid).camera_pose;
      rays.push_back(Ray{pose.translation, (pose.rotation * unproject(k_, o.pixel)).normalized()});
    }
    if (!(ray_conditioning(rays) > config_.slam.min_ray_conditioning)) return;
    Vec3 x;
    try {
      x = triangulate_point(rays);
    } catch (const Error&) {
      return;
    }
    double max_parallax = 0.0;
    for (size_t a = 0; a < rays.size(); ++a) {
      for (size_t b = a + 1; b < rays.size(); ++b) {
        max_parallax = std::max(max_parallax, parallax_deg(rays[a].origin, rays[b].origin, x));
      }
    }
    if (max_parallax < config_.pipeline.landmark_min_parallax_deg) return;
    for (const auto& [kid, o] : views) {
      const Pose& pose = map.keyframes.at(kid).camera_pose;
      const auto px = try_project(k_, pose.rotation.transpose() * (x - pose.translation));
      // front-end poses are noisy, so the gate is loose
      if (!px || (px->vec() - o.pixel.vec()).norm() > 3.0 * config_.slam.mu_e * std::ldexp(1.0, o.level)) return;
    }
    MapPoint p;
    p.position = x;
    const uint32_t id = map.add_point(std::move(p));
    for (const auto& [kid, o] : views) map.keyframes.at(kid).measurements.push_back({id, o.pixel, o.level});
    point_of_[landmark] = id;
    pending_.erase(landmark);
  }

  const CameraIntrinsics& k_;
  const Config& config_;
  std::map<uint32_t, const FrameTracks*> by_frame_;
  std::map<uint32_t, uint32_t> point_of_;
  std::map<uint32_t, std::vector<std::pair<uint32_t, TrackObservation>>> pending_;
};

}  // namespace

PipelineResult run_pipeline(const VocabularyTree& vocab, const ObjectDatabase& db, std::vector<Frame> frames,
                            const std::vector<FrameTracks>& tracks, const Config& config,
                            const InjectionHook& hook) {
  if (db.vocabulary().hash() != vocab.hash()) {
    throw InvalidArgument("run_pipeline: database was built with a different vocabulary");
  }
  const CameraIntrinsics& k = config.camera;
  PipelineResult result;
  MapState& map = result.map;
  StageClock& clock = result.clock;
  LandmarkTracker tracker(tracks, k, config);
  BaOptions local_options = config.ba;
  local_options.max_iterations = config.pipeline.local_ba_iterations;

  clock.start(Stage::kRegioning);
  for (size_t f = 0; f < frames.size(); ++f) {
    Frame& frame = frames[f];
    ++result.stats.frames;
    {
      StageScope scope(&clock, Stage::kRegioning);
      quantize_frame(frame, vocab);
    }
    std::vector<PriorPose> priors;
    {
      StageScope scope(&clock, Stage::kAssociation);
      for (const auto& [id, inst] : map.instances) {
        const auto prior = compute_prior_pose(prior_state(inst), frame.camera_pose, frame.timestamp, map.scale,
                                              config.recognition.prior_staleness_s);
        if (prior) priors.push_back(*prior);
      }
    }
    FrameRecognition rec = recognize_frame(frame, priors, db, k, config.recognition, &clock);
    std::vector<Observation> observations;
    for (auto& obs : rec.observations) {
      if (static_cast<int>(obs.matches.size()) >= config.pipeline.min_detection_inliers) {
        observations.push_back(std::move(obs));
      }
    }
    if (hook) hook(frame, map, observations);

    std::vector<uint32_t> new_keyframes;
    bool object_inserted = false;
    if (f % static_cast<size_t>(config.pipeline.keyframe_interval) == 0 && !map.keyframes.count(frame.id)) {
      StageScope scope(&clock, Stage::kTriangulation);
      map.ensure_keyframe(frame.id, frame.timestamp, frame.camera_pose);
      new_keyframes.push_back(frame.id);
    }
    for (const auto& obs : observations) {
      int iid;
      bool kept;
      {
        StageScope scope(&clock, Stage::kAssociation);
        iid = associate_observation(map, obs, db, config.slam);
        kept = accumulate(map.instances.at(iid), obs, map, k, config.slam);
      }
      ++result.stats.detections;
      result.detections.push_back(DetectionRecord{obs.frame_id, obs.model_id, iid, obs.score, obs.object_in_camera,
                                                  obs.matches.size()});
      if (!kept) continue;
      ++result.stats.accumulated;
      StageScope scope(&clock, Stage::kTriangulation);
      ObjectInstance& inst = map.instances.at(iid);
      const bool was_triangulated = inst.triangulated();
      const auto tri = try_triangulate(map, inst, db.model(inst.model_id), k, config.slam);
      if (!tri) continue;
      ++result.stats.triangulations;
      const auto created = insert_triangulation(map, inst, *tri);
      new_keyframes.insert(new_keyframes.end(), created.begin(), created.end());
      if (!was_triangulated) object_inserted = true;
    }

    {
      StageScope scope(&clock, Stage::kTriangulation);
      std::sort(new_keyframes.begin(), new_keyframes.end());
      for (uint32_t kid : new_keyframes) tracker.add_keyframe(map, kid);
    }

    StageScope scope(&clock, Stage::kBundleAdjustment);
    if (!new_keyframes.empty() && map.keyframes.size() >= 2) {
      local_bundle_adjust(map, new_keyframes.back(), k, local_options);
      ++result.stats.local_ba;
    }
    if (config.pipeline.global_ba_on_insert && (object_inserted || !new_keyframes.empty()) &&
        map.keyframes.size() >= 2) {
      joint_bundle_adjust(map, k, config.ba);
      ++result.stats.global_ba;
    }
  }
  if (map.keyframes.size() >= 2) {
    StageScope scope(&clock, Stage::kBundleAdjustment);
    joint_bundle_adjust(map, k, config.ba);
    ++result.stats.global_ba;
  }
  clock.stop();
  map.check_consistency();
  return result;
}

void write_pipeline_outputs(const std::string& dir, const PipelineResult& result) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path root(dir);
  write_map((root / "map.txt").string(), result.map);
  write_text_file((root / "detections.txt").string(), format_detections(result.detections));
  Trajectory keyframes;
  for (const auto& [id, kf] : result.map.keyframes) keyframes.push_back(StampedPose{kf.timestamp, kf.camera_pose});
  write_trajectory((root / "keyframes.txt").string(), keyframes);
  write_text_file((root / "timings.txt").string(), result.clock.report());
}

}  // namespace objslam
