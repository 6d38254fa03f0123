// Sparse Levenberg-Marquardt over cameras, map points, object poses and the
// global scale, with Huber weights applied by iterative reweighting.

#include "objslam/bundle_adjustment.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <set>

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include "objslam/errors.h"

namespace objslam {
namespace {

struct CameraVar {
  uint32_t keyframe;
  Pose camera_from_world;
  int offset = -1;  // -1 when held fixed
};

struct ObjectVar {
  int instance;
  Pose object_from_world;
  int offset = -1;
};

struct PointVar {
  uint32_t id;
  Vec3 position;
  int offset = -1;
};

struct ReprojTerm {
  int camera;
  int point;
  Vec2 measured;
  double information;
};

struct AlignTerm {
  int object;
  int point;
  Vec3 object_point;
};

struct State {
  std::vector<CameraVar> cameras;
  std::vector<ObjectVar> objects;
  std::vector<PointVar> points;
  double log_scale = 0.0;
  int scale_offset = -1;
};

// Monocular scale gauge: the distance from the fixed camera to a reference
// camera is held at its starting value by rescaling the map about the fixed
// camera after each step. The objective is invariant under that rescaling.
struct ScaleGauge {
  int fixed_camera;
  int reference_camera;
  double distance;
};

Vec3 camera_center(const Pose& camera_from_world) {
  return -(camera_from_world.rotation.transpose() * camera_from_world.translation);
}

void normalize_gauge(State& s, const ScaleGauge& g) {
  const Vec3 c0 = camera_center(s.cameras[g.fixed_camera].camera_from_world);
  const double d = (camera_center(s.cameras[g.reference_camera].camera_from_world) - c0).norm();
  if (!(d > 0.0) || !std::isfinite(d)) return;
  const double lambda = g.distance / d;
  for (auto& c : s.cameras) {
    if (c.offset < 0) continue;
    const Vec3 center = c0 + lambda * (camera_center(c.camera_from_world) - c0);
    c.camera_from_world.translation = -(c.camera_from_world.rotation * center);
  }
  for (auto& p : s.points) {
    if (p.offset >= 0) p.position = c0 + lambda * (p.position - c0);
  }
  const double scale = std::exp(s.log_scale);
  for (auto& o : s.objects) {
    o.object_from_world.translation -= scale * (1.0 / lambda - 1.0) * (o.object_from_world.rotation * c0);
  }
  s.log_scale -= std::log(lambda);
}

class Problem {
 public:
  Problem(const CameraIntrinsics& k, const BaOptions& options) : k_(k), options_(options) {}

  State state;
  std::optional<ScaleGauge> gauge;
  std::vector<ReprojTerm> reproj;
  std::vector<AlignTerm> align;
  int dimension = 0;

  // Robust objective; +inf if a point falls behind a camera.
  double cost(const State& s) const {
    double total = 0.0;
    const double align_info = 1.0 / (options_.alignment_sigma * options_.alignment_sigma);
    for (const auto& t : reproj) {
      const Pose& cam = s.cameras[t.camera].camera_from_world;
      const Vec3 pc = cam * s.points[t.point].position;
      const auto px = try_project(k_, pc);
      if (!px) return std::numeric_limits<double>::infinity();
      const Vec2 e = t.measured - px->vec();
      total += huber(t.information * e.squaredNorm(), options_.reprojection_delta_sq);
    }
    const double scale = std::exp(s.log_scale);
    for (const auto& t : align) {
      const Pose& obj = s.objects[t.object].object_from_world;
      const Vec3 a = t.object_point - (scale * (obj.rotation * s.points[t.point].position) + obj.translation);
      total += huber(align_info * a.squaredNorm(), options_.alignment_delta_sq);
    }
    return total;
  }

  // Gauss-Newton system with IRLS weights at `s`.
  void linearize(const State& s, Eigen::SparseMatrix<double>& h, Eigen::VectorXd& g) const {
    std::vector<Eigen::Triplet<double>> triplets;
    triplets.reserve(reproj.size() * 81 + align.size() * 100);
    g = Eigen::VectorXd::Zero(dimension);
    struct Block {
      int offset;
      int cols;
      int col_in_j;
    };
    auto accumulate = [&](const Eigen::MatrixXd& j, const Eigen::VectorXd& e, const Eigen::MatrixXd& w,
                          const std::vector<Block>& blocks) {
      const Eigen::MatrixXd jtw = j.transpose() * w;
      const Eigen::MatrixXd jtwj = jtw * j;
      const Eigen::VectorXd jtwe = jtw * e;
      for (const auto& a : blocks) {
        g.segment(a.offset, a.cols) += jtwe.segment(a.col_in_j, a.cols);
        for (const auto& b : blocks) {
          for (int r = 0; r < a.cols; ++r) {
            for (int c = 0; c < b.cols; ++c) {
              triplets.emplace_back(a.offset + r, b.offset + c, jtwj(a.col_in_j + r, b.col_in_j + c));
            }
          }
        }
      }
    };

    for (const auto& t : reproj) {
      const CameraVar& cam = s.cameras[t.camera];
      const PointVar& pt = s.points[t.point];
      if (cam.offset < 0 && pt.offset < 0) continue;
      const Vec3 pc = cam.camera_from_world * pt.position;
      const auto px = try_project(k_, pc);
      if (!px) continue;
      const Vec2 e = t.measured - px->vec();
      const double x = t.information * e.squaredNorm();
      const double w = x <= options_.reprojection_delta_sq ? 1.0 : std::sqrt(options_.reprojection_delta_sq / x);
      const ReprojectionJacobians jac = reprojection_jacobians(cam.camera_from_world, pt.position, k_);
      Eigen::MatrixXd j(2, 9);
      j << jac.camera, jac.point;
      std::vector<Block> blocks;
      if (cam.offset >= 0) blocks.push_back({cam.offset, 6, 0});
      if (pt.offset >= 0) blocks.push_back({pt.offset, 3, 6});
      accumulate(j, e, Eigen::Matrix2d::Identity() * (w * t.information), blocks);
    }
    const double scale = std::exp(s.log_scale);
    const double align_info = 1.0 / (options_.alignment_sigma * options_.alignment_sigma);
    for (const auto& t : align) {
      const ObjectVar& obj = s.objects[t.object];
      const PointVar& pt = s.points[t.point];
      const Vec3 a = t.object_point - (scale * (obj.object_from_world.rotation * pt.position) +
                                       obj.object_from_world.translation);
      const double x = align_info * a.squaredNorm();
      const double w = x <= options_.alignment_delta_sq ? 1.0 : std::sqrt(options_.alignment_delta_sq / x);
      const AlignmentJacobians jac = alignment_jacobians(obj.object_from_world, scale, pt.position);
      Eigen::MatrixXd j(3, 10);
      j << jac.object, jac.point, jac.log_scale;
      std::vector<Block> blocks;
      if (obj.offset >= 0) blocks.push_back({obj.offset, 6, 0});
      if (pt.offset >= 0) blocks.push_back({pt.offset, 3, 6});
      if (s.scale_offset >= 0) blocks.push_back({s.scale_offset, 1, 9});
      if (blocks.empty()) continue;
      accumulate(j, a, Eigen::Matrix3d::Identity() * (w * align_info), blocks);
    }
    // Explicit diagonal so damping never inserts new entries.
    for (int i = 0; i < dimension; ++i) triplets.emplace_back(i, i, 0.0);
    h.resize(dimension, dimension);
    h.setFromTriplets(triplets.begin(), triplets.end());
  }

  State apply(const State& s, const Eigen::VectorXd& delta) const {
    State out = s;
    for (auto& c : out.cameras) {
      if (c.offset >= 0) c.camera_from_world = apply_increment(c.camera_from_world, delta.segment<6>(c.offset));
    }
    for (auto& o : out.objects) {
      if (o.offset >= 0) o.object_from_world = apply_increment(o.object_from_world, delta.segment<6>(o.offset));
    }
    for (auto& p : out.points) {
      if (p.offset >= 0) p.position += delta.segment<3>(p.offset);
    }
    if (out.scale_offset >= 0) out.log_scale += delta(out.scale_offset);
    return out;
  }

  BaReport solve() {
    BaReport report;
    report.reprojection_terms = reproj.size();
    report.alignment_terms = align.size();
    double current = cost(state);
    report.initial_cost = current;
    report.final_cost = current;
    report.cost_history.push_back(current);
    if (dimension == 0 || current == 0.0) {
      report.converged = true;
      report.message = dimension == 0 ? "no free variables" : "zero objective";
      return report;
    }
    double lambda = options_.initial_lambda;
    Eigen::SparseMatrix<double> h;
    Eigen::VectorXd g;
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt;
    for (int iter = 0; iter < options_.max_iterations; ++iter) {
      report.iterations = iter + 1;
      linearize(state, h, g);
      Eigen::VectorXd diag = h.diagonal();
      bool analyzed = false;
      bool stepped = false;
      while (lambda < 1e12) {
        Eigen::SparseMatrix<double> damped = h;
        for (int i = 0; i < dimension; ++i) damped.coeffRef(i, i) += lambda * std::max(diag(i), 1e-6);
        if (!analyzed) {
          ldlt.analyzePattern(damped);
          analyzed = true;
        }
        ldlt.factorize(damped);
        if (ldlt.info() == Eigen::Success) {
          const Eigen::VectorXd delta = ldlt.solve(-g);
          if (delta.allFinite()) {
            State candidate = apply(state, delta);
            if (gauge) normalize_gauge(candidate, *gauge);
            const double next = cost(candidate);
            if (next < current) {
              const double decrease = (current - next) / current;
              state = std::move(candidate);
              current = next;
              report.cost_history.push_back(current);
              lambda = std::max(lambda / 10.0, 1e-12);
              stepped = true;
              if (decrease < options_.relative_tolerance || current == 0.0) {
                report.converged = true;
                report.message = "relative decrease below tolerance";
              }
              break;
            }
          }
        }
        lambda *= 10.0;
      }
      if (!stepped) {
        report.converged = true;
        report.message = "no descending step";
        break;
      }
      if (report.converged) break;
    }
    if (!report.converged) report.message = "iteration cap reached";
    report.final_cost = current;
    return report;
  }

 private:
  const CameraIntrinsics& k_;
  const BaOptions& options_;
};

// Which variables to free and which terms to include.
struct Selection {
  std::set<uint32_t> free_cameras;
  std::set<uint32_t> free_points;
  bool objects = false;
};

BaReport run(MapState& map, const CameraIntrinsics& k, const BaOptions& options, const Selection& sel) {
  Problem problem(k, options);
  State& s = problem.state;
  std::map<uint32_t, int> cam_index, point_index;
  std::map<int, int> object_index;
  int offset = 0;

  // Residual set: every measurement that touches a free camera or a free point.
  for (const auto& [kid, kf] : map.keyframes) {
    const bool cam_free = sel.free_cameras.count(kid) > 0;
    for (const auto& m : kf.measurements) {
      const bool point_free = sel.free_points.count(m.point_id) > 0;
      if (!cam_free && !point_free) continue;
      const auto pit = map.points.find(m.point_id);
      if (pit == map.points.end()) continue;
      const Pose cfw = kf.camera_pose.inverse();
      if (!try_project(k, cfw * pit->second.position)) continue;  // excluded at setup
      auto [cit, cnew] = cam_index.emplace(kid, static_cast<int>(s.cameras.size()));
      if (cnew) s.cameras.push_back({kid, cfw, -1});
      auto [ptit, pnew] = point_index.emplace(m.point_id, static_cast<int>(s.points.size()));
      if (pnew) s.points.push_back({m.point_id, pit->second.position, -1});
      problem.reproj.push_back({cit->second, ptit->second, m.pixel.vec(), reprojection_information(m.level)});
    }
  }
  if (sel.objects && options.include_alignment && map.scale) {
    for (const auto& [iid, inst] : map.instances) {
      if (!inst.world_pose) continue;
      for (const auto& [mp, pid] : inst.anchors) {
        const MapPoint& p = map.points.at(pid);
        auto [oit, onew] = object_index.emplace(iid, static_cast<int>(s.objects.size()));
        if (onew) s.objects.push_back({iid, inst.world_pose->inverse(), -1});
        auto [ptit, pnew] = point_index.emplace(pid, static_cast<int>(s.points.size()));
        if (pnew) s.points.push_back({pid, p.position, -1});
        problem.align.push_back({oit->second, ptit->second, p.object_point});
      }
    }
  }
  for (auto& c : s.cameras) {
    if (sel.free_cameras.count(c.keyframe)) {
      c.offset = offset;
      offset += 6;
    }
  }
  for (auto& o : s.objects) {
    o.offset = offset;
    offset += 6;
  }
  if (!problem.align.empty()) {
    s.log_scale = std::log(*map.scale);
    s.scale_offset = offset;
    offset += 1;
  } else if (map.scale) {
    s.log_scale = std::log(*map.scale);
  }
  for (auto& p : s.points) {
    if (sel.free_points.count(p.id)) {
      p.offset = offset;
      offset += 3;
    }
  }
  problem.dimension = offset;
  // A single fixed camera with every point free leaves the scale unobserved.
  int fixed = -1, fixed_count = 0;
  for (size_t i = 0; i < s.cameras.size(); ++i) {
    if (s.cameras[i].offset < 0) {
      fixed = static_cast<int>(i);
      ++fixed_count;
    }
  }
  const bool points_free = std::all_of(s.points.begin(), s.points.end(), [](const PointVar& p) { return p.offset >= 0; });
  if (fixed_count == 1 && points_free && (s.scale_offset >= 0 || !map.scale || problem.align.empty())) {
    int reference = -1;
    double farthest = 0.0;
    const Vec3 c0 = camera_center(s.cameras[fixed].camera_from_world);
    for (size_t i = 0; i < s.cameras.size(); ++i) {
      const double d = (camera_center(s.cameras[i].camera_from_world) - c0).norm();
      if (s.cameras[i].offset >= 0 && d > farthest) {
        farthest = d;
        reference = static_cast<int>(i);
      }
    }
    if (reference >= 0) problem.gauge = ScaleGauge{fixed, reference, farthest};
  }

  BaReport report = problem.solve();

  // Write back only the free variables; fixed ones stay bitwise untouched.
  for (const auto& c : s.cameras) {
    if (c.offset >= 0) map.keyframes.at(c.keyframe).camera_pose = c.camera_from_world.inverse();
  }
  for (const auto& o : s.objects) {
    if (o.offset >= 0) map.instances.at(o.instance).world_pose = o.object_from_world.inverse();
  }
  for (const auto& p : s.points) {
    if (p.offset >= 0) map.points.at(p.id).position = p.position;
  }
  if (s.scale_offset >= 0) map.scale = std::exp(s.log_scale);
  return report;
}

}  // namespace

double huber(double x, double delta_sq) {
  if (x < delta_sq) return x;
  return 2.0 * std::sqrt(delta_sq) * std::sqrt(x) - delta_sq;
}

double reprojection_information(int level) { return 1.0 / std::ldexp(1.0, 2 * level); }

Vec2 reprojection_residual(const Pose& camera_pose, const Vec3& world_point, const PixelPoint& measured,
                           const CameraIntrinsics& k) {
  return measured.vec() - cam_project(k, camera_pose.inverse() * world_point).vec();
}

Vec3 alignment_residual(const Pose& world_pose, double scale, const Vec3& object_point,
                        const Vec3& world_point) {
  const Mat3 rt = world_pose.rotation.transpose();
  return object_point - scale * (rt * world_point) + rt * world_pose.translation;
}

ReprojectionJacobians reprojection_jacobians(const Pose& camera_from_world, const Vec3& world_point,
                                             const CameraIntrinsics& k) {
  const Vec3 rx = camera_from_world.rotation * world_point;
  const Eigen::Matrix<double, 2, 3> jp = projection_jacobian(k, rx + camera_from_world.translation);
  ReprojectionJacobians out;
  out.camera.leftCols<3>() = jp * skew(rx);
  out.camera.rightCols<3>() = -jp;
  out.point = -jp * camera_from_world.rotation;
  return out;
}

AlignmentJacobians alignment_jacobians(const Pose& object_from_world, double scale,
                                       const Vec3& world_point) {
  const Vec3 rx = object_from_world.rotation * world_point;
  AlignmentJacobians out;
  out.object.leftCols<3>() = skew(scale * rx);
  out.object.rightCols<3>() = -Mat3::Identity();
  out.point = -scale * object_from_world.rotation;
  out.log_scale = -scale * rx;
  return out;
}

double robust_objective(const MapState& map, const CameraIntrinsics& k, const BaOptions& options) {
  double total = 0.0;
  for (const auto& [kid, kf] : map.keyframes) {
    const Pose cfw = kf.camera_pose.inverse();
    for (const auto& m : kf.measurements) {
      const auto px = try_project(k, cfw * map.points.at(m.point_id).position);
      if (!px) continue;
      const double x = reprojection_information(m.level) * (m.pixel.vec() - px->vec()).squaredNorm();
      total += huber(x, options.reprojection_delta_sq);
    }
  }
  if (options.include_alignment && map.scale) {
    const double info = 1.0 / (options.alignment_sigma * options.alignment_sigma);
    for (const auto& [iid, inst] : map.instances) {
      if (!inst.world_pose) continue;
      for (const auto& [mp, pid] : inst.anchors) {
        const MapPoint& p = map.points.at(pid);
        const Vec3 a = alignment_residual(*inst.world_pose, *map.scale, p.object_point, p.position);
        total += huber(info * a.squaredNorm(), options.alignment_delta_sq);
      }
    }
  }
  return total;
}

BaReport joint_bundle_adjust(MapState& map, const CameraIntrinsics& k, const BaOptions& options) {
  Selection sel;
  const auto first = map.first_keyframe();
  for (const auto& [kid, kf] : map.keyframes) {
    if (!first || kid != *first) sel.free_cameras.insert(kid);
  }
  for (const auto& [pid, p] : map.points) sel.free_points.insert(pid);
  sel.objects = true;
  return run(map, k, options, sel);
}

std::vector<uint32_t> local_window(const MapState& map, uint32_t keyframe_id, int neighbours) {
  const Keyframe& kf = map.keyframes.at(keyframe_id);
  std::set<uint32_t> seen;
  for (const auto& m : kf.measurements) seen.insert(m.point_id);
  std::vector<std::pair<size_t, uint32_t>> scored;  // (shared points, id)
  for (const auto& [kid, other] : map.keyframes) {
    if (kid == keyframe_id) continue;
    size_t shared = 0;
    for (const auto& m : other.measurements) shared += seen.count(m.point_id);
    if (shared > 0) scored.emplace_back(shared, kid);
  }
  std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second > b.second;
  });
  std::vector<uint32_t> window{keyframe_id};
  for (size_t i = 0; i < scored.size() && static_cast<int>(i) < neighbours; ++i) window.push_back(scored[i].second);
  return window;
}

BaReport local_bundle_adjust(MapState& map, uint32_t keyframe_id, const CameraIntrinsics& k,
                             BaOptions options) {
  options.include_alignment = false;
  Selection sel;
  const auto first = map.first_keyframe();
  for (uint32_t kid : local_window(map, keyframe_id)) {
    if (!first || kid != *first) sel.free_cameras.insert(kid);
    for (const auto& m : map.keyframes.at(kid).measurements) sel.free_points.insert(m.point_id);
  }
  return run(map, k, options, sel);
}

}  // namespace objslam
