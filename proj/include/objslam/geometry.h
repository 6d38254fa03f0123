#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace objslam {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Rigid transform x' = R x + t. The frame naming follows T_AB: maps points
// expressed in B into A.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return Pose{}; }

  Vec3 operator*(const Vec3& p) const { return rotation * p + translation; }
  Pose operator*(const Pose& other) const {
    return Pose{rotation * other.rotation, rotation * other.translation + translation};
  }
  Pose inverse() const {
    const Mat3 rt = rotation.transpose();
    return Pose{rt, -(rt * translation)};
  }
  Eigen::Matrix4d matrix() const;

  Eigen::Quaterniond quaternion() const { return Eigen::Quaterniond(rotation).normalized(); }
  static Pose from_quaternion(const Eigen::Quaterniond& q, const Vec3& t) {
    return Pose{q.normalized().toRotationMatrix(), t};
  }
};

Pose compose(const Pose& a, const Pose& b);
Pose invert(const Pose& pose);

// Rotation angle of R in degrees, in [0, 180].
double rotation_angle_deg(const Mat3& rotation);

Mat3 skew(const Vec3& v);
// Rodrigues exponential of a rotation vector.
Mat3 so3_exp(const Vec3& omega);
Vec3 so3_log(const Mat3& rotation);

// Left-multiplied increment: R <- exp(phi) R, t <- t + rho. This is the 6-vector
// manifold update used by PnP refinement and bundle adjustment.
Pose apply_increment(const Pose& pose, const Eigen::Matrix<double, 6, 1>& delta);

struct PixelPoint {
  double u = 0.0;
  double v = 0.0;

  Vec2 vec() const { return {u, v}; }
};

// Field-of-view camera: pinhole intrinsics plus the single-parameter arctan
// distortion r' = atan(2 r tan(omega/2)) / omega.
struct CameraIntrinsics {
  double fu = 500.0;
  double fv = 500.0;
  double u0 = 320.0;
  double v0 = 240.0;
  double omega = 0.0;
  int width = 640;
  int height = 480;

  void validate() const;
  bool in_image(const PixelPoint& p) const {
    return p.u >= 0.0 && p.v >= 0.0 && p.u < width && p.v < height;
  }
};

// Projects a camera-frame point. Throws PointBehindCamera for z <= 0.
PixelPoint cam_project(const CameraIntrinsics& k, const Vec3& p);

// Non-throwing variant for hot loops.
std::optional<PixelPoint> try_project(const CameraIntrinsics& k, const Vec3& p);

// d(u,v)/d(x,y,z) at p (z > 0).
Eigen::Matrix<double, 2, 3> projection_jacobian(const CameraIntrinsics& k, const Vec3& p);

// Unit bearing in the camera frame for a pixel.
Vec3 unproject(const CameraIntrinsics& k, const PixelPoint& px);

struct Ray {
  Vec3 origin;
  Vec3 direction;  // unit
};

// Least-squares point closest to all rays. Throws DegenerateGeometry when the
// normal matrix has condition number above 1e10.
Vec3 triangulate_point(std::span<const Ray> rays);

// Sum of squared perpendicular distances and its gradient, exposed for tests.
double ray_distance_cost(std::span<const Ray> rays, const Vec3& x, Vec3* gradient = nullptr);

// Smallest eigenvalue of sum(I - d d^T) over the rays.
double ray_conditioning(std::span<const Ray> rays);

// Angle in degrees subtended at `point` by the two camera centers.
double parallax_deg(const Pose& cam_a, const Pose& cam_b, const Vec3& point);
double parallax_deg(const Vec3& center_a, const Vec3& center_b, const Vec3& point);

struct Correspondence2D3D {
  PixelPoint pixel;
  Vec3 point;
};

// Camera-from-model pose from >= 4 correspondences: EPnP followed by
// Gauss-Newton on reprojection error.
Pose solve_pnp(std::span<const Correspondence2D3D> corrs, const CameraIntrinsics& k);

// Gauss-Newton refinement of an initial camera-from-model pose.
Pose refine_pnp(std::span<const Correspondence2D3D> corrs, const CameraIntrinsics& k,
                const Pose& initial, int max_iterations = 20);

// Linear initial estimate only, for tests.
Pose epnp(std::span<const Correspondence2D3D> corrs, const CameraIntrinsics& k);

// Similarity x -> scale * R x + t.
struct Similarity {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  double scale = 1.0;

  Vec3 operator*(const Vec3& p) const { return scale * (rotation * p) + translation; }
};

// Closed-form (Horn, unit quaternion) alignment mapping `source` onto `target`.
Similarity horn_align(std::span<const Vec3> source, std::span<const Vec3> target,
                      bool with_scale);

struct StampedPose {
  double timestamp = 0.0;
  Pose pose;
};

using Trajectory = std::vector<StampedPose>;

Similarity horn_align(const Trajectory& est, const Trajectory& gt, bool with_scale);

// TUM format: "timestamp tx ty tz qx qy qz qw", '#' comments.
Trajectory read_trajectory(const std::string& path);
Trajectory parse_trajectory(const std::string& text);
void write_trajectory(const std::string& path, const Trajectory& trajectory);
std::string format_trajectory(const Trajectory& trajectory);
std::string format_pose_tum(const Pose& pose);

}  // namespace objslam
