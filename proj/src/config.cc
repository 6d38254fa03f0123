#include "objslam/config.h"

#include <charconv>
#include <functional>
#include <sstream>

#include "objslam/binary_io.h"
#include "objslam/errors.h"

namespace objslam {

namespace {

struct Field {
  std::string key;
  std::function<void(Config&, const std::string&)> set;
  std::function<std::string(const Config&)> get;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    throw FormatError("config: bad value for " + key + ": '" + v + "'");
  }
  return out;
}

template <typename T>
std::string to_text(T v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

// Builds a field bound to a member reached through `access`.
template <typename T, typename Access>
Field field(std::string key, Access access) {
  Field f;
  f.key = key;
  f.set = [key, access](Config& c, const std::string& v) { access(c) = parse_number<T>(key, v); };
  f.get = [access](const Config& c) { return to_text(access(const_cast<Config&>(c))); };
  return f;
}

Field bool_field(std::string key, std::function<bool&(Config&)> access) {
  Field f;
  f.key = key;
  f.set = [key, access](Config& c, const std::string& v) {
    if (v == "true" || v == "1") {
      access(c) = true;
    } else if (v == "false" || v == "0") {
      access(c) = false;
    } else {
      throw FormatError("config: bad value for " + key + ": '" + v + "'");
    }
  };
  f.get = [access](const Config& c) { return std::string(access(const_cast<Config&>(c)) ? "true" : "false"); };
  return f;
}

#define OBJSLAM_FIELD(type, key, expr) field<type>(key, [](Config& c) -> type& { return expr; })

const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    f.push_back(OBJSLAM_FIELD(double, "camera.fu", c.camera.fu));
    f.push_back(OBJSLAM_FIELD(double, "camera.fv", c.camera.fv));
    f.push_back(OBJSLAM_FIELD(double, "camera.u0", c.camera.u0));
    f.push_back(OBJSLAM_FIELD(double, "camera.v0", c.camera.v0));
    f.push_back(OBJSLAM_FIELD(double, "camera.omega", c.camera.omega));
    f.push_back(OBJSLAM_FIELD(int, "camera.width", c.camera.width));
    f.push_back(OBJSLAM_FIELD(int, "camera.height", c.camera.height));

    f.push_back(OBJSLAM_FIELD(uint64_t, "scene.seed", c.scene.seed));
    f.push_back(OBJSLAM_FIELD(int, "scene.num_models", c.scene.num_models));
    f.push_back(OBJSLAM_FIELD(int, "scene.points_per_model", c.scene.points_per_model));
    f.push_back(OBJSLAM_FIELD(int, "scene.descriptors_per_point", c.scene.descriptors_per_point));
    f.push_back(OBJSLAM_FIELD(double, "scene.model_extent", c.scene.model_extent));
    f.push_back(OBJSLAM_FIELD(int, "scene.num_instances", c.scene.num_instances));
    f.push_back(OBJSLAM_FIELD(double, "scene.placement_radius", c.scene.placement_radius));
    {
      Field w;
      w.key = "scene.waypoints";
      w.set = [](Config& c, const std::string& v) {
        parse_waypoints(v);
        c.scene.waypoints = v;
      };
      w.get = [](const Config& c) { return c.scene.waypoints; };
      f.push_back(w);
    }
    f.push_back(OBJSLAM_FIELD(double, "scene.trajectory_radius", c.scene.trajectory_radius));
    f.push_back(OBJSLAM_FIELD(double, "scene.trajectory_height", c.scene.trajectory_height));
    f.push_back(OBJSLAM_FIELD(double, "scene.trajectory_arc_deg", c.scene.trajectory_arc_deg));
    f.push_back(OBJSLAM_FIELD(int, "scene.num_frames", c.scene.num_frames));
    f.push_back(OBJSLAM_FIELD(double, "scene.frame_rate", c.scene.frame_rate));
    f.push_back(OBJSLAM_FIELD(int, "scene.clutter_per_frame", c.scene.clutter_per_frame));
    f.push_back(OBJSLAM_FIELD(int, "scene.descriptor_noise_bits", c.scene.descriptor_noise_bits));
    f.push_back(OBJSLAM_FIELD(double, "scene.pixel_noise", c.scene.pixel_noise));
    f.push_back(OBJSLAM_FIELD(double, "scene.true_scale", c.scene.true_scale));
    f.push_back(OBJSLAM_FIELD(double, "scene.pose_noise_deg", c.scene.pose_noise_deg));
    f.push_back(OBJSLAM_FIELD(double, "scene.pose_noise_translation", c.scene.pose_noise_translation));
    f.push_back(OBJSLAM_FIELD(int, "scene.landmarks", c.scene.landmarks));
    f.push_back(OBJSLAM_FIELD(double, "scene.landmark_radius", c.scene.landmark_radius));
    f.push_back(OBJSLAM_FIELD(int, "scene.descriptor_branching", c.scene.descriptor_branching));
    f.push_back(OBJSLAM_FIELD(int, "scene.descriptor_depth", c.scene.descriptor_depth));
    f.push_back(OBJSLAM_FIELD(int, "scene.corpus_images", c.scene.corpus_images));
    f.push_back(OBJSLAM_FIELD(int, "scene.corpus_features", c.scene.corpus_features));

    f.push_back(OBJSLAM_FIELD(double, "recognition.bandwidth_px", c.recognition.bandwidth_px));
    f.push_back(OBJSLAM_FIELD(double, "recognition.max_link_factor", c.recognition.max_link_factor));
    f.push_back(OBJSLAM_FIELD(int, "recognition.top_n", c.recognition.top_n));
    f.push_back(OBJSLAM_FIELD(int, "recognition.max_hamming", c.recognition.max_hamming));
    f.push_back(OBJSLAM_FIELD(double, "recognition.mu_e", c.recognition.mu_e));
    f.push_back(OBJSLAM_FIELD(int, "recognition.disac_iterations", c.recognition.disac_iterations));
    f.push_back(OBJSLAM_FIELD(double, "recognition.confidence", c.recognition.confidence));
    f.push_back(OBJSLAM_FIELD(double, "recognition.refine_radius_px", c.recognition.refine_radius_px));
    f.push_back(OBJSLAM_FIELD(double, "recognition.prior_search_radius_px", c.recognition.prior_search_radius_px));
    f.push_back(OBJSLAM_FIELD(int, "recognition.min_inliers", c.recognition.min_inliers));
    f.push_back(OBJSLAM_FIELD(double, "recognition.min_score_factor", c.recognition.min_score_factor));
    f.push_back(OBJSLAM_FIELD(int, "recognition.retrieval_rounds", c.recognition.retrieval_rounds));
    f.push_back(OBJSLAM_FIELD(double, "recognition.duplicate_margin_px", c.recognition.duplicate_margin_px));
    f.push_back(OBJSLAM_FIELD(double, "recognition.prior_staleness_s", c.recognition.prior_staleness_s));
    f.push_back(OBJSLAM_FIELD(uint64_t, "recognition.seed", c.recognition.seed));

    f.push_back(OBJSLAM_FIELD(double, "slam.overlap_radius_factor", c.slam.overlap_radius_factor));
    f.push_back(OBJSLAM_FIELD(double, "slam.accumulate_parallax_deg", c.slam.accumulate_parallax_deg));
    f.push_back(OBJSLAM_FIELD(double, "slam.triangulation_parallax_deg", c.slam.triangulation_parallax_deg));
    f.push_back(OBJSLAM_FIELD(int, "slam.min_triangulation_points", c.slam.min_triangulation_points));
    f.push_back(OBJSLAM_FIELD(double, "slam.min_ray_conditioning", c.slam.min_ray_conditioning));
    f.push_back(OBJSLAM_FIELD(double, "slam.collinearity_ratio", c.slam.collinearity_ratio));
    f.push_back(OBJSLAM_FIELD(double, "slam.mu_e", c.slam.mu_e));
    f.push_back(OBJSLAM_FIELD(double, "slam.max_shape_residual", c.slam.max_shape_residual));
    f.push_back(OBJSLAM_FIELD(double, "slam.max_rotation_disagreement_deg", c.slam.max_rotation_disagreement_deg));
    f.push_back(OBJSLAM_FIELD(double, "slam.max_scale_disagreement", c.slam.max_scale_disagreement));
    f.push_back(OBJSLAM_FIELD(double, "slam.max_anchor_alignment", c.slam.max_anchor_alignment));
    f.push_back(OBJSLAM_FIELD(double, "slam.staleness_s", c.slam.staleness_s));

    f.push_back(OBJSLAM_FIELD(int, "ba.max_iterations", c.ba.max_iterations));
    f.push_back(OBJSLAM_FIELD(double, "ba.initial_lambda", c.ba.initial_lambda));
    f.push_back(OBJSLAM_FIELD(double, "ba.relative_tolerance", c.ba.relative_tolerance));
    f.push_back(OBJSLAM_FIELD(double, "ba.reprojection_delta_sq", c.ba.reprojection_delta_sq));
    f.push_back(OBJSLAM_FIELD(double, "ba.alignment_delta_sq", c.ba.alignment_delta_sq));
    f.push_back(OBJSLAM_FIELD(double, "ba.alignment_sigma", c.ba.alignment_sigma));
    f.push_back(bool_field("ba.include_alignment", [](Config& c) -> bool& { return c.ba.include_alignment; }));

    f.push_back(OBJSLAM_FIELD(int, "pipeline.keyframe_interval", c.pipeline.keyframe_interval));
    f.push_back(OBJSLAM_FIELD(int, "pipeline.min_detection_inliers", c.pipeline.min_detection_inliers));
    f.push_back(OBJSLAM_FIELD(double, "pipeline.landmark_min_parallax_deg", c.pipeline.landmark_min_parallax_deg));
    f.push_back(bool_field("pipeline.global_ba_on_insert",
                           [](Config& c) -> bool& { return c.pipeline.global_ba_on_insert; }));
    f.push_back(OBJSLAM_FIELD(int, "pipeline.local_ba_iterations", c.pipeline.local_ba_iterations));
    return f;
  }();
  return all;
}

#undef OBJSLAM_FIELD

}  // namespace

void Config::validate() const {
  camera.validate();
  const SceneConfig& s = scene;
  if (s.num_models < 0 || s.points_per_model < 0 || s.num_instances < 0 || s.num_frames < 0 ||
      s.clutter_per_frame < 0 || s.descriptor_noise_bits < 0 || s.landmarks < 0 || s.corpus_images < 0 ||
      s.corpus_features < 0) {
    throw InvalidArgument("config: counts must be non-negative");
  }
  if (s.descriptors_per_point < 1) throw InvalidArgument("config: descriptors_per_point must be >= 1");
  if (s.num_instances > 0 && s.num_models == 0) throw InvalidArgument("config: instances need models");
  if (!(s.true_scale > 0.0)) throw InvalidArgument("config: true_scale must be positive");
  if (!(s.model_extent > 0.0)) throw InvalidArgument("config: model_extent must be positive");
  if (!(s.frame_rate > 0.0)) throw InvalidArgument("config: frame_rate must be positive");
  if (s.pixel_noise < 0.0 || s.pose_noise_deg < 0.0 || s.pose_noise_translation < 0.0) {
    throw InvalidArgument("config: noise levels must be non-negative");
  }
  if (s.descriptor_branching < 2 || s.descriptor_depth < 1) {
    throw InvalidArgument("config: descriptor world needs branching >= 2 and depth >= 1");
  }
  if (pipeline.keyframe_interval < 1) throw InvalidArgument("config: keyframe_interval must be >= 1");
  if (recognition.mu_e <= 0.0 || slam.mu_e <= 0.0) throw InvalidArgument("config: mu_e must be positive");
}

Config parse_config(const std::string& text, const Config& base) {
  Config cfg = base;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError("config: line " + std::to_string(lineno) + " is not 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    bool found = false;
    for (const auto& f : fields()) {
      if (f.key == key) {
        f.set(cfg, value);
        found = true;
        break;
      }
    }
    if (!found) throw FormatError("config: unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

Config read_config(const std::string& path) { return parse_config(read_text_file(path)); }

std::string format_config(const Config& config) {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(config) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

std::vector<Vec3> parse_waypoints(const std::string& text) {
  std::vector<Vec3> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ';')) {
    item = trim(item);
    if (item.empty()) continue;
    std::istringstream row(item);
    std::string a, b, c;
    if (!std::getline(row, a, ',') || !std::getline(row, b, ',') || !std::getline(row, c)) {
      throw FormatError("config: waypoint '" + item + "' is not x,y,z");
    }
    out.emplace_back(parse_number<double>("waypoint", trim(a)), parse_number<double>("waypoint", trim(b)),
                     parse_number<double>("waypoint", trim(c)));
  }
  return out;
}

}  // namespace objslam
