#include "objslam/recognition.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "objslam/binary_io.h"
#include "objslam/errors.h"

namespace objslam {
namespace {

Pose metric_camera(const Pose& camera_pose, double scale) {
  return Pose{camera_pose.rotation, scale * camera_pose.translation};
}

std::vector<Correspondence2D3D> match_corrs(std::span<const ObservationMatch> matches,
                                            const ObjectModel& model) {
  std::vector<Correspondence2D3D> out;
  out.reserve(matches.size());
  for (const auto& m : matches) out.push_back({m.pixel, model.points[m.point]});
  return out;
}

struct Verified {
  Pose pose;
  std::vector<ObservationMatch> matches;
  double score = 0.0;
};

// DISAC over `matches`, then guided refinement; nullopt unless accepted.
std::optional<Verified> verify_matches(const std::vector<ObservationMatch>& matches,
                                       const ObjectModel& model, const Frame& frame,
                                       const std::vector<bool>& available, const CameraIntrinsics& k,
                                       const RecognitionParams& params, Random& rng,
                                       StageClock* clock) {
  if (matches.size() < 4) return std::nullopt;
  std::optional<PoseHypothesis> hyp;
  {
    StageScope scope(clock, Stage::kDisac);
    const auto corrs = match_corrs(matches, model);
    std::vector<int> distances;
    distances.reserve(matches.size());
    for (const auto& m : matches) distances.push_back(m.distance);
    hyp = disac_verify(corrs, distances, k, rng, params.disac_iterations, params.mu_e,
                       params.confidence);
  }
  if (!hyp) return std::nullopt;
  std::vector<ObservationMatch> inliers;
  for (size_t i : hyp->inliers) inliers.push_back(matches[i]);
  StageScope scope(clock, Stage::kRefinement);
  RefineResult refined = refine_pose(hyp->pose, inliers, model, frame, available, k, params);
  if (!accept_detection(refined.score, refined.matches.size(), params)) return std::nullopt;
  return Verified{refined.pose, std::move(refined.matches), refined.score};
}

Observation make_observation(const Frame& frame, uint32_t model_id, Verified v) {
  Observation obs;
  obs.frame_id = frame.id;
  obs.timestamp = frame.timestamp;
  obs.camera_pose = frame.camera_pose;
  obs.model_id = model_id;
  obs.object_in_camera = v.pose;
  obs.matches = std::move(v.matches);
  obs.score = v.score;
  return obs;
}

}  // namespace

std::vector<Frame> parse_frames(const std::string& text) {
  std::vector<Frame> frames;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream row(line);
    if (line.compare(first, 5, "frame") == 0) {
      std::string tag;
      long long id = -1;
      Frame f;
      if (!(row >> tag >> id >> f.timestamp) || id < 0) {
        throw FormatError("frames: bad header '" + line + "'");
      }
      f.id = static_cast<uint32_t>(id);
      Vec3 t;
      double qx, qy, qz, qw;
      if (row >> t.x()) {
        if (!(row >> t.y() >> t.z() >> qx >> qy >> qz >> qw)) {
          throw FormatError("frames: bad pose in header '" + line + "'");
        }
        f.camera_pose = Pose::from_quaternion(Eigen::Quaterniond(qw, qx, qy, qz), t);
      }
      frames.push_back(std::move(f));
      continue;
    }
    if (frames.empty()) throw FormatError("frames: feature line before any frame header");
    FrameFeature feat;
    std::string hex;
    if (!(row >> feat.pixel.u >> feat.pixel.v >> feat.level >> hex) || feat.level < 0) {
      throw FormatError("frames: bad feature line '" + line + "'");
    }
    feat.descriptor = descriptor_from_hex(hex);
    frames.back().features.push_back(std::move(feat));
  }
  return frames;
}

std::vector<Frame> read_frames(const std::string& path) { return parse_frames(read_text_file(path)); }

std::string format_frames(std::span<const Frame> frames) {
  std::string out;
  char buf[160];
  for (const auto& f : frames) {
    std::snprintf(buf, sizeof(buf), "frame %u %.6f ", f.id, f.timestamp);
    out += buf;
    out += format_pose_tum(f.camera_pose);
    out += '\n';
    for (const auto& feat : f.features) {
      std::snprintf(buf, sizeof(buf), "%.4f %.4f %d ", feat.pixel.u, feat.pixel.v, feat.level);
      out += buf;
      out += to_hex(feat.descriptor);
      out += '\n';
    }
  }
  return out;
}

void write_frames(const std::string& path, std::span<const Frame> frames) {
  write_text_file(path, format_frames(frames));
}

void quantize_frame(Frame& frame, const VocabularyTree& vocab) {
  for (auto& f : frame.features) f.path = vocab.quantize(f.descriptor);
}

std::vector<Region> quick_shift_regions(std::span<const PixelPoint> points, double bandwidth_px,
                                        double max_link_factor) {
  const size_t n = points.size();
  if (n == 0) return {};
  if (!(bandwidth_px > 0.0)) throw InvalidArgument("quick-shift bandwidth must be positive");
  const double inv_two_sigma_sq = 1.0 / (2.0 * bandwidth_px * bandwidth_px);
  std::vector<double> density(n, 0.0);
  for (size_t i = 0; i < n; ++i) {
    for (size_t j = 0; j < n; ++j) {
      const double d2 = (points[i].vec() - points[j].vec()).squaredNorm();
      density[i] += std::exp(-d2 * inv_two_sigma_sq);
    }
  }
  // Strict order: higher density, or equal density with a lower index.
  auto higher = [&](size_t j, size_t i) {
    return density[j] > density[i] || (density[j] == density[i] && j < i);
  };
  const double max_link_sq = std::pow(max_link_factor * bandwidth_px, 2);
  std::vector<size_t> parent(n);
  for (size_t i = 0; i < n; ++i) {
    parent[i] = i;
    double best = max_link_sq;
    for (size_t j = 0; j < n; ++j) {
      if (j == i || !higher(j, i)) continue;
      const double d2 = (points[i].vec() - points[j].vec()).squaredNorm();
      if (d2 <= best && (parent[i] == i || d2 < best || j < parent[i])) {
        best = d2;
        parent[i] = j;
      }
    }
  }
  std::vector<size_t> root(n);
  for (size_t i = 0; i < n; ++i) {
    size_t r = i;
    while (parent[r] != r) r = parent[r];
    root[i] = r;
  }
  std::vector<size_t> first_member(n, n);
  for (size_t i = 0; i < n; ++i) first_member[root[i]] = std::min(first_member[root[i]], i);
  std::vector<Region> regions;
  std::map<size_t, int> index_of_first;
  for (size_t i = 0; i < n; ++i) {
    const size_t key = first_member[root[i]];
    auto it = index_of_first.find(key);
    if (it == index_of_first.end()) {
      it = index_of_first.emplace(key, static_cast<int>(regions.size())).first;
      regions.push_back(Region{static_cast<int>(regions.size()), {}, Vec2::Zero()});
    }
    regions[it->second].members.push_back(static_cast<uint32_t>(i));
  }
  for (auto& r : regions) {
    for (uint32_t m : r.members) r.centroid += points[m].vec();
    r.centroid /= static_cast<double>(r.members.size());
  }
  return regions;
}

std::optional<PriorPose> compute_prior_pose(const InstancePriorState& instance,
                                            const Pose& camera_pose, double timestamp,
                                            std::optional<double> scale, double staleness_s) {
  PriorPose prior;
  prior.instance_id = instance.instance_id;
  prior.model_id = instance.model_id;
  if (instance.world_pose) {
    prior.object_in_camera = metric_camera(camera_pose, scale.value_or(1.0)).inverse() * *instance.world_pose;
    prior.source = PriorSource::kInMap;
    return prior;
  }
  if (!instance.has_last) return std::nullopt;
  if (scale) {
    prior.object_in_camera = metric_camera(camera_pose, *scale).inverse() *
                             metric_camera(instance.last_camera_pose, *scale) *
                             instance.last_object_in_camera;
    prior.source = PriorSource::kScaledRecent;
    return prior;
  }
  if (timestamp - instance.last_timestamp <= staleness_s) {
    prior.object_in_camera = instance.last_object_in_camera;
    prior.source = PriorSource::kUnscaledRecent;
    return prior;
  }
  return std::nullopt;
}

PriorDetections detect_with_priors(const Frame& frame, std::span<const PriorPose> priors,
                                   const ObjectDatabase& db, const CameraIntrinsics& k,
                                   const RecognitionParams& params, std::vector<bool>& available,
                                   StageClock* clock) {
  PriorDetections out;
  std::vector<const PriorPose*> ordered;
  for (const auto& p : priors) ordered.push_back(&p);
  std::stable_sort(ordered.begin(), ordered.end(), [](const PriorPose* a, const PriorPose* b) {
    return a->instance_id < b->instance_id;
  });
  for (const PriorPose* prior : ordered) {
    if (!db.contains(prior->model_id)) continue;
    const ObjectModel& model = db.model(prior->model_id);
    const auto center = try_project(k, prior->object_in_camera * model.centroid);
    if (!center || !k.in_image(*center)) continue;
    std::vector<ObservationMatch> matches;
    {
      StageScope scope(clock, Stage::kCorrespondence);
      matches = guided_matches(prior->object_in_camera, model, frame, available, k,
                               params.prior_search_radius_px, params.max_hamming);
    }
    Random rng(mix_seed(mix_seed(params.seed, frame.id), 0x100000000ULL + static_cast<uint64_t>(prior->instance_id)));
    auto verified = verify_matches(matches, model, frame, available, k, params, rng, clock);
    if (!verified) continue;
    Observation obs = make_observation(frame, model.id, std::move(*verified));
    obs.instance_hint = prior->instance_id;
    obs.from_prior = true;
    for (const auto& m : obs.matches) {
      available[m.feature] = false;
      out.consumed.push_back(m.feature);
    }
    out.observations.push_back(std::move(obs));
  }
  return out;
}

std::vector<ModelCorrespondences> general_retrieval(const Frame& frame,
                                                    const std::vector<bool>& available,
                                                    const ObjectDatabase& db,
                                                    const RecognitionParams& params,
                                                    StageClock* clock) {
  std::vector<uint32_t> remaining;
  std::vector<PixelPoint> pixels;
  for (uint32_t f = 0; f < frame.features.size(); ++f) {
    if (!available[f]) continue;
    remaining.push_back(f);
    pixels.push_back(frame.features[f].pixel);
  }
  if (remaining.empty() || db.size() == 0) return {};
  std::vector<Region> regions;
  {
    StageScope scope(clock, Stage::kRegioning);
    regions = quick_shift_regions(pixels, params.bandwidth_px, params.max_link_factor);
  }
  // (model, feature, point) -> lowest distance
  std::map<uint32_t, std::map<std::pair<uint32_t, uint32_t>, int>> merged;
  for (const auto& region : regions) {
    std::vector<QueryFeature> query;
    std::vector<uint32_t> words;
    query.reserve(region.members.size());
    for (uint32_t m : region.members) {
      const auto& f = frame.features[remaining[m]];
      query.push_back({f.pixel, f.descriptor, f.path});
      words.push_back(f.path.word);
    }
    std::vector<Candidate> candidates;
    {
      StageScope scope(clock, Stage::kQuery);
      const BowVector bow = db.vocabulary().to_bow_words(words);
      if (bow.empty()) continue;
      candidates = db.query(bow, params.top_n);
    }
    StageScope scope(clock, Stage::kCorrespondence);
    for (const auto& cand : candidates) {
      const auto matches = db.direct_index_correspondences(query, cand.model_id, params.max_hamming);
      auto& per_model = merged[cand.model_id];
      for (const auto& mt : matches) {
        const uint32_t feature = remaining[region.members[mt.feature]];
        const auto key = std::pair{feature, mt.point};
        const auto it = per_model.find(key);
        if (it == per_model.end() || mt.distance < it->second) per_model[key] = mt.distance;
      }
    }
  }
  std::vector<ModelCorrespondences> out;
  for (const auto& [model_id, pairs] : merged) {
    if (pairs.empty()) continue;
    ModelCorrespondences mc;
    mc.model_id = model_id;
    for (const auto& [key, dist] : pairs) {
      mc.matches.push_back({key.first, frame.features[key.first].pixel, key.second, dist});
    }
    out.push_back(std::move(mc));
  }
  return out;
}

FrameRecognition recognize_frame(const Frame& frame, std::span<const PriorPose> priors,
                                 const ObjectDatabase& db, const CameraIntrinsics& k,
                                 const RecognitionParams& params, StageClock* clock) {
  FrameRecognition result;
  std::vector<bool> available(frame.features.size(), true);
  PriorDetections prior = detect_with_priors(frame, priors, db, k, params, available, clock);
  result.prior_detections = prior.observations.size();
  result.observations = std::move(prior.observations);

  const auto candidates = general_retrieval(frame, available, db, params, clock);
  for (int round = 0; round < params.retrieval_rounds; ++round) {
    std::vector<Observation> accepted;
    for (const auto& mc : candidates) {
      std::vector<ObservationMatch> matches;
      for (const auto& mt : mc.matches) {
        if (!available[mt.feature]) continue;
        matches.push_back({mt.point, mt.feature, mt.pixel, frame.features[mt.feature].level, mt.distance});
      }
      if (matches.size() < 4) continue;
      const ObjectModel& model = db.model(mc.model_id);
      Random rng(mix_seed(mix_seed(params.seed, frame.id), 8ULL * mc.model_id + static_cast<uint64_t>(round)));
      auto verified = verify_matches(matches, model, frame, available, k, params, rng, clock);
      if (verified) accepted.push_back(make_observation(frame, mc.model_id, std::move(*verified)));
    }
    // Greedy consumption: stronger detections claim their features first.
    std::stable_sort(accepted.begin(), accepted.end(), [](const Observation& a, const Observation& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.model_id < b.model_id;
    });
    bool any = false;
    for (auto& obs : accepted) {
      const bool clash = std::any_of(obs.matches.begin(), obs.matches.end(),
                                     [&](const ObservationMatch& m) { return !available[m.feature]; });
      if (clash) continue;
      for (const auto& m : obs.matches) available[m.feature] = false;
      // Leftover features of an object already found re-detect it with a poor
      // pose; such a detection sits mostly inside the earlier one's image extent.
      const bool duplicate = std::any_of(
          result.observations.begin(), result.observations.end(), [&](const Observation& other) {
            if (other.model_id != obs.model_id || other.matches.empty()) return false;
            Vec2 lo = other.matches.front().pixel.vec(), hi = lo;
            for (const auto& m : other.matches) {
              lo = lo.cwiseMin(m.pixel.vec());
              hi = hi.cwiseMax(m.pixel.vec());
            }
            const Vec2 pad = Vec2::Constant(params.duplicate_margin_px);
            lo -= pad;
            hi += pad;
            size_t inside = 0;
            for (const auto& m : obs.matches) {
              const Vec2 p = m.pixel.vec();
              if ((p.array() >= lo.array()).all() && (p.array() <= hi.array()).all()) ++inside;
            }
            return 2 * inside >= obs.matches.size();
          });
      if (duplicate) continue;
      result.observations.push_back(std::move(obs));
      any = true;
    }
    if (!any) break;
  }
  return result;
}

std::string format_detections(std::span<const DetectionRecord> records) {
  std::string out = "# frame_id model_id instance_id score tx ty tz qx qy qz qw n_corrs\n";
  char buf[320];
  for (const auto& r : records) {
    const Eigen::Quaterniond q = r.object_in_camera.quaternion();
    const Vec3& t = r.object_in_camera.translation;
    std::snprintf(buf, sizeof(buf), "%u %u %d %.6f %.9f %.9f %.9f %.9f %.9f %.9f %.9f %zu\n",
                  r.frame_id, r.model_id, r.instance_id, r.score, t.x(), t.y(), t.z(), q.x(), q.y(),
                  q.z(), q.w(), r.n_corrs);
    out += buf;
  }
  return out;
}

std::vector<DetectionRecord> parse_detections(const std::string& text) {
  std::vector<DetectionRecord> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream row(line);
    DetectionRecord r;
    Vec3 t;
    double qx, qy, qz, qw;
    if (!(row >> r.frame_id >> r.model_id >> r.instance_id >> r.score >> t.x() >> t.y() >> t.z() >>
          qx >> qy >> qz >> qw >> r.n_corrs)) {
      throw FormatError("detections: bad line '" + line + "'");
    }
    r.object_in_camera = Pose::from_quaternion(Eigen::Quaterniond(qw, qx, qy, qz), t);
    out.push_back(r);
  }
  return out;
}

}  // namespace objslam
