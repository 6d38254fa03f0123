#include "objslam/scene.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <sstream>

#include "objslam/binary_io.h"
#include "objslam/errors.h"

namespace objslam {

namespace {

enum Stream : uint64_t { kWorld = 1, kModels, kCorpus, kPlacement, kFrames, kLandmarks, kPoseNoise };

struct ModelGeometry {
  std::vector<Vec3> normals;  // per point, object frame
};

int sample_level(Random& rng) {
  const double u = rng.uniform();
  return u < 0.6 ? 0 : (u < 0.9 ? 1 : 2);
}

Mat3 random_rotation(Random& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  return q.normalized().toRotationMatrix();
}

// Points on the surface of a box, picked per face with probability proportional to area.
void box_model(uint32_t id, const SceneConfig& cfg, DescriptorWorld& world, Random& rng, RawModel& model,
               ModelGeometry& geom) {
  Vec3 half(cfg.model_extent, cfg.model_extent * rng.uniform(0.5, 1.0), cfg.model_extent * rng.uniform(0.5, 1.0));
  half *= 0.5;
  std::swap(half(0), half(static_cast<int>(rng.uniform_index(3))));
  const double areas[3] = {half(1) * half(2), half(0) * half(2), half(0) * half(1)};
  const double total = areas[0] + areas[1] + areas[2];
  model.id = id;
  model.points.clear();
  geom.normals.clear();
  for (int i = 0; i < cfg.points_per_model; ++i) {
    double u = rng.uniform() * total;
    int axis = 0;
    while (axis < 2 && u >= areas[axis]) u -= areas[axis++];
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    Vec3 p;
    for (int a = 0; a < 3; ++a) p(a) = rng.uniform(-half(a), half(a));
    p(axis) = sign * half(axis);
    Vec3 n = Vec3::Zero();
    n(axis) = sign;
    RawModelPoint pt;
    pt.position = p;
    const BinaryDescriptor base = world.sample(rng);
    pt.descriptors.push_back(base);
    for (int d = 1; d < cfg.descriptors_per_point; ++d) pt.descriptors.push_back(flip_random_bits(base, 4, rng));
    model.points.push_back(std::move(pt));
    geom.normals.push_back(n);
  }
}

std::vector<Vec3> camera_path(const SceneConfig& cfg) {
  std::vector<Vec3> centers;
  const int n = cfg.num_frames;
  const std::vector<Vec3> way = parse_waypoints(cfg.waypoints);
  if (way.size() >= 2) {
    std::vector<double> cum(1, 0.0);
    for (size_t i = 1; i < way.size(); ++i) cum.push_back(cum.back() + (way[i] - way[i - 1]).norm());
    for (int f = 0; f < n; ++f) {
      const double s = n > 1 ? cum.back() * f / (n - 1) : 0.0;
      size_t seg = 1;
      while (seg + 1 < way.size() && cum[seg] < s) ++seg;
      const double len = cum[seg] - cum[seg - 1];
      const double t = len > 0.0 ? (s - cum[seg - 1]) / len : 0.0;
      centers.push_back(way[seg - 1] + t * (way[seg] - way[seg - 1]));
    }
    return centers;
  }
  if (way.size() == 1) return std::vector<Vec3>(n, way[0]);
  const double arc = cfg.trajectory_arc_deg * std::numbers::pi / 180.0;
  for (int f = 0; f < n; ++f) {
    const double th = n > 1 ? -0.5 * arc + arc * f / (n - 1) : 0.0;
    centers.emplace_back(cfg.trajectory_radius * std::sin(th), -cfg.trajectory_radius * std::cos(th),
                         cfg.trajectory_height);
  }
  return centers;
}

std::string pose_line(const Pose& pose) { return format_pose_tum(pose); }

}  // namespace

DescriptorWorld::DescriptorWorld(uint64_t seed, int branching, int depth)
    : seed_(seed), branching_(branching), depth_(depth) {
  if (branching < 2 || depth < 1) throw InvalidArgument("DescriptorWorld: bad shape");
}

int DescriptorWorld::level_flips(int level) { return std::max(96 >> (level - 1), 6); }

BinaryDescriptor DescriptorWorld::prototype(const std::vector<int>& path) {
  if (path.empty()) throw InvalidArgument("DescriptorWorld: empty path");
  if (const auto it = cache_.find(path); it != cache_.end()) return it->second;
  uint64_t code = 0;
  for (int c : path) code = mix_seed(code, static_cast<uint64_t>(c) + 1);
  Random rng(mix_seed(seed_, code));
  BinaryDescriptor d;
  if (path.size() == 1) {
    d = random_descriptor(rng);
  } else {
    const std::vector<int> parent(path.begin(), path.end() - 1);
    d = flip_random_bits(prototype(parent), level_flips(static_cast<int>(path.size())), rng);
  }
  cache_.emplace(path, d);
  return d;
}

std::vector<int> DescriptorWorld::random_leaf(Random& rng) const {
  std::vector<int> path(depth_);
  for (int& c : path) c = static_cast<int>(rng.uniform_index(branching_));
  return path;
}

BinaryDescriptor DescriptorWorld::sample(Random& rng) {
  const std::vector<int> leaf = random_leaf(rng);
  return flip_random_bits(prototype(leaf), kLeafFlips, rng);
}

Pose look_at(const Vec3& center, const Vec3& target) {
  const Vec3 z = (target - center).normalized();
  Vec3 x = z.cross(Vec3::UnitZ());
  if (x.norm() < 1e-9) x = z.cross(Vec3::UnitY());
  x.normalize();
  const Vec3 y = z.cross(x);
  Mat3 r;
  r.col(0) = x;
  r.col(1) = y;
  r.col(2) = z;
  return Pose{r, center};
}

Scene generate_scene(const Config& config) {
  config.validate();
  const SceneConfig& cfg = config.scene;
  const CameraIntrinsics& k = config.camera;
  Scene scene;
  scene.config = config;
  scene.truth.true_scale = cfg.true_scale;
  DescriptorWorld world(mix_seed(cfg.seed, kWorld), cfg.descriptor_branching, cfg.descriptor_depth);

  Random model_rng(mix_seed(cfg.seed, kModels));
  std::vector<ModelGeometry> geoms(cfg.num_models);
  scene.models.resize(cfg.num_models);
  for (int m = 0; m < cfg.num_models; ++m) {
    box_model(static_cast<uint32_t>(m), cfg, world, model_rng, scene.models[m], geoms[m]);
  }

  Random corpus_rng(mix_seed(cfg.seed, kCorpus));
  scene.corpus.images.resize(cfg.corpus_images);
  for (auto& image : scene.corpus.images) {
    image.reserve(cfg.corpus_features);
    for (int i = 0; i < cfg.corpus_features; ++i) image.push_back(world.sample(corpus_rng));
  }

  Random place_rng(mix_seed(cfg.seed, kPlacement));
  for (int i = 0; i < cfg.num_instances; ++i) {
    const double a = 2.0 * std::numbers::pi * i / cfg.num_instances;
    SceneInstance inst;
    inst.id = i;
    inst.model_id = static_cast<uint32_t>(i % cfg.num_models);
    const double yaw = place_rng.uniform(-std::numbers::pi, std::numbers::pi);
    inst.world_pose.rotation = Eigen::AngleAxisd(yaw, Vec3::UnitZ()).toRotationMatrix();
    inst.world_pose.translation = Vec3(cfg.placement_radius * std::cos(a), cfg.placement_radius * std::sin(a), 0.0);
    scene.truth.instances.push_back(inst);
  }

  Random lm_rng(mix_seed(cfg.seed, kLandmarks));
  std::vector<Vec3> landmarks;
  for (int i = 0; i < cfg.landmarks; ++i) {
    Vec3 dir(lm_rng.normal(), lm_rng.normal(), lm_rng.normal());
    dir.normalize();
    landmarks.push_back(dir * cfg.landmark_radius * lm_rng.uniform(0.8, 1.2));
  }

  const std::vector<Vec3> centers = camera_path(cfg);
  Random frame_rng(mix_seed(cfg.seed, kFrames));
  Random noise_rng(mix_seed(cfg.seed, kPoseNoise));
  for (int f = 0; f < cfg.num_frames; ++f) {
    const double ts = f / cfg.frame_rate;
    const Pose twc = look_at(centers[f], Vec3::Zero());
    scene.truth.trajectory.push_back(StampedPose{ts, twc});
    const Pose tcw = twc.inverse();

    struct Pending {
      FrameFeature feature;
      int instance;
      uint32_t point;
    };
    std::vector<Pending> pending;
    for (const auto& inst : scene.truth.instances) {
      const RawModel& model = scene.models[inst.model_id];
      const ModelGeometry& geom = geoms[inst.model_id];
      for (size_t p = 0; p < model.points.size(); ++p) {
        const Vec3 xw = inst.world_pose * model.points[p].position;
        const Vec3 nw = inst.world_pose.rotation * geom.normals[p];
        const Vec3 to_cam = twc.translation - xw;
        if (nw.dot(to_cam) < 0.1 * to_cam.norm()) continue;
        const auto px = try_project(k, tcw * xw);
        if (!px || !k.in_image(*px)) continue;
        const auto& ds = model.points[p].descriptors;
        Pending pf;
        pf.feature.level = sample_level(frame_rng);
        const double sigma = cfg.pixel_noise * std::ldexp(1.0, pf.feature.level);
        pf.feature.pixel = PixelPoint{px->u + frame_rng.normal(0.0, sigma), px->v + frame_rng.normal(0.0, sigma)};
        const BinaryDescriptor& src = ds[frame_rng.uniform_index(ds.size())];
        pf.feature.descriptor = flip_random_bits(src, cfg.descriptor_noise_bits, frame_rng);
        pf.instance = inst.id;
        pf.point = static_cast<uint32_t>(p);
        if (!k.in_image(pf.feature.pixel)) continue;
        pending.push_back(std::move(pf));
      }
    }
    for (int c = 0; c < cfg.clutter_per_frame; ++c) {
      Pending pf;
      pf.feature.pixel = PixelPoint{frame_rng.uniform(0.0, k.width), frame_rng.uniform(0.0, k.height)};
      pf.feature.level = sample_level(frame_rng);
      pf.feature.descriptor = random_descriptor(frame_rng);
      pf.instance = -1;
      pending.push_back(std::move(pf));
    }
    // Fisher-Yates so feature order carries no information.
    for (size_t i = pending.size(); i > 1; --i) std::swap(pending[i - 1], pending[frame_rng.uniform_index(i)]);

    Frame frame;
    frame.id = static_cast<uint32_t>(f);
    frame.timestamp = ts;
    Pose est = twc;
    if (cfg.pose_noise_deg > 0.0) {
      const Vec3 w(noise_rng.normal(), noise_rng.normal(), noise_rng.normal());
      est.rotation = so3_exp(w * (cfg.pose_noise_deg * std::numbers::pi / 180.0)) * est.rotation;
    }
    if (cfg.pose_noise_translation > 0.0) {
      est.translation += Vec3(noise_rng.normal(), noise_rng.normal(), noise_rng.normal()) * cfg.pose_noise_translation;
    }
    est.translation *= cfg.true_scale;
    frame.camera_pose = est;
    auto& gt_corrs = scene.truth.correspondences[frame.id];
    for (size_t i = 0; i < pending.size(); ++i) {
      frame.features.push_back(pending[i].feature);
      if (pending[i].instance >= 0) {
        gt_corrs.push_back(GtCorrespondence{static_cast<uint32_t>(i), pending[i].instance, pending[i].point});
      }
    }
    scene.frames.push_back(std::move(frame));

    FrameTracks tracks;
    tracks.frame_id = static_cast<uint32_t>(f);
    for (size_t l = 0; l < landmarks.size(); ++l) {
      const auto px = try_project(k, tcw * landmarks[l]);
      if (!px || !k.in_image(*px)) continue;
      TrackObservation t;
      t.landmark = static_cast<uint32_t>(l);
      t.level = sample_level(frame_rng);
      const double sigma = cfg.pixel_noise * std::ldexp(1.0, t.level);
      t.pixel = PixelPoint{px->u + frame_rng.normal(0.0, sigma), px->v + frame_rng.normal(0.0, sigma)};
      tracks.observations.push_back(t);
    }
    scene.tracks.push_back(std::move(tracks));
  }
  return scene;
}

std::string format_tracks(const std::vector<FrameTracks>& tracks) {
  std::string out;
  char buf[128];
  for (const auto& t : tracks) {
    std::snprintf(buf, sizeof(buf), "frame %u %zu\n", t.frame_id, t.observations.size());
    out += buf;
    for (const auto& o : t.observations) {
      std::snprintf(buf, sizeof(buf), "%u %.4f %.4f %d\n", o.landmark, o.pixel.u, o.pixel.v, o.level);
      out += buf;
    }
  }
  return out;
}

std::vector<FrameTracks> parse_tracks(const std::string& text) {
  std::vector<FrameTracks> out;
  std::istringstream in(text);
  std::string word;
  while (in >> word) {
    if (word != "frame") throw FormatError("tracks: expected 'frame'");
    FrameTracks t;
    size_t n = 0;
    if (!(in >> t.frame_id >> n)) throw FormatError("tracks: bad frame header");
    for (size_t i = 0; i < n; ++i) {
      TrackObservation o;
      if (!(in >> o.landmark >> o.pixel.u >> o.pixel.v >> o.level)) throw FormatError("tracks: bad observation");
      t.observations.push_back(o);
    }
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<FrameTracks> read_tracks(const std::string& path) { return parse_tracks(read_text_file(path)); }

std::string format_ground_truth_objects(const std::vector<SceneInstance>& instances) {
  std::string out = "# instance model tx ty tz qx qy qz qw\n";
  char buf[64];
  for (const auto& i : instances) {
    std::snprintf(buf, sizeof(buf), "%d %u ", i.id, i.model_id);
    out += buf;
    out += pose_line(i.world_pose);
    out += "\n";
  }
  return out;
}

std::string format_gt_correspondences(const std::map<uint32_t, std::vector<GtCorrespondence>>& corrs) {
  std::string out;
  char buf[96];
  for (const auto& [frame, list] : corrs) {
    std::snprintf(buf, sizeof(buf), "frame %u %zu\n", frame, list.size());
    out += buf;
    for (const auto& c : list) {
      std::snprintf(buf, sizeof(buf), "%u %d %u\n", c.feature, c.instance, c.model_point);
      out += buf;
    }
  }
  return out;
}

void write_scene(const std::string& dir, const Scene& scene) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "models");
  const fs::path root(dir);
  write_text_file((root / "config.txt").string(), format_config(scene.config));
  write_training_set((root / "corpus.txt").string(), scene.corpus);
  for (const auto& m : scene.models) {
    char name[32];
    std::snprintf(name, sizeof(name), "model_%04u.txt", m.id);
    write_raw_model((root / "models" / name).string(), m);
  }
  write_frames((root / "frames.txt").string(), scene.frames);
  write_text_file((root / "tracks.txt").string(), format_tracks(scene.tracks));
  write_trajectory((root / "groundtruth.txt").string(), scene.truth.trajectory);
  write_text_file((root / "gt_objects.txt").string(), format_ground_truth_objects(scene.truth.instances));
  write_text_file((root / "gt_correspondences.txt").string(),
                  format_gt_correspondences(scene.truth.correspondences));
  char buf[64];
  std::snprintf(buf, sizeof(buf), "true_scale %.9f\n", scene.truth.true_scale);
  write_text_file((root / "scene_info.txt").string(), buf);
}

std::vector<std::string> model_files(const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  const fs::path models = fs::path(dir) / "models";
  if (!fs::exists(models)) return files;
  for (const auto& e : fs::directory_iterator(models)) {
    if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path().string());
  }
  std::sort(files.begin(), files.end());
  return files;
}

GroundTruth read_ground_truth(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  GroundTruth gt;
  gt.trajectory = read_trajectory((root / "groundtruth.txt").string());
  {
    std::istringstream in(read_text_file((root / "gt_objects.txt").string()));
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty() || line[0] == '#') continue;
      std::istringstream row(line);
      SceneInstance inst;
      Vec3 t;
      double qx, qy, qz, qw;
      if (!(row >> inst.id >> inst.model_id >> t.x() >> t.y() >> t.z() >> qx >> qy >> qz >> qw)) {
        throw FormatError("gt_objects: bad line");
      }
      inst.world_pose = Pose::from_quaternion(Eigen::Quaterniond(qw, qx, qy, qz), t);
      gt.instances.push_back(inst);
    }
  }
  {
    std::istringstream in(read_text_file((root / "gt_correspondences.txt").string()));
    std::string word;
    while (in >> word) {
      if (word != "frame") throw FormatError("gt_correspondences: expected 'frame'");
      uint32_t frame;
      size_t n;
      if (!(in >> frame >> n)) throw FormatError("gt_correspondences: bad header");
      auto& list = gt.correspondences[frame];
      for (size_t i = 0; i < n; ++i) {
        GtCorrespondence c;
        if (!(in >> c.feature >> c.instance >> c.model_point)) throw FormatError("gt_correspondences: bad line");
        list.push_back(c);
      }
    }
  }
  {
    std::istringstream in(read_text_file((root / "scene_info.txt").string()));
    std::string key;
    bool found = false;
    while (in >> key) {
      if (key == "true_scale") {
        if (!(in >> gt.true_scale)) throw FormatError("scene_info: bad true_scale");
        found = true;
      } else {
        std::string skip;
        in >> skip;
      }
    }
    if (!found) throw FormatError("scene_info: missing true_scale");
  }
  return gt;
}

Observation make_spurious_observation(const ObjectModel& model, const Frame& frame, const CameraIntrinsics& k,
                                      Random& rng) {
  Observation obs;
  obs.frame_id = frame.id;
  obs.timestamp = frame.timestamp;
  obs.camera_pose = frame.camera_pose;
  obs.model_id = model.id;
  const PixelPoint center{rng.uniform(0.25, 0.75) * k.width, rng.uniform(0.25, 0.75) * k.height};
  const double depth = rng.uniform(1.0, 3.0);
  const Vec3 ray = unproject(k, center);
  obs.object_in_camera.rotation = random_rotation(rng);
  obs.object_in_camera.translation = ray / ray.z() * depth - obs.object_in_camera.rotation * model.centroid;
  for (size_t p = 0; p < model.points.size(); ++p) {
    const auto px = try_project(k, obs.object_in_camera * model.points[p]);
    if (!px || !k.in_image(*px)) continue;
    ObservationMatch m;
    m.point = static_cast<uint32_t>(p);
    m.feature = static_cast<uint32_t>(obs.matches.size());
    m.pixel = *px;
    m.distance = static_cast<int>(rng.uniform_index(20));
    obs.matches.push_back(m);
  }
  obs.score = static_cast<double>(obs.matches.size());
  return obs;
}

}  // namespace objslam
