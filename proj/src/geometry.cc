#include "objslam/geometry.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "objslam/errors.h"

namespace objslam {

Eigen::Matrix4d Pose::matrix() const {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = rotation;
  m.topRightCorner<3, 1>() = translation;
  return m;
}

Pose compose(const Pose& a, const Pose& b) { return a * b; }

Pose invert(const Pose& pose) { return pose.inverse(); }

double rotation_angle_deg(const Mat3& rotation) {
  // atan2 keeps precision near 0 where acos of the trace does not.
  const Vec3 axis(rotation(2, 1) - rotation(1, 2), rotation(0, 2) - rotation(2, 0), rotation(1, 0) - rotation(0, 1));
  return std::atan2(0.5 * axis.norm(), 0.5 * (rotation.trace() - 1.0)) * 180.0 / std::numbers::pi;
}

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

Mat3 so3_exp(const Vec3& omega) {
  const double theta = omega.norm();
  const Mat3 k = skew(omega);
  if (theta < 1e-10) return Mat3::Identity() + k + 0.5 * k * k;
  const double a = std::sin(theta) / theta;
  const double b = (1.0 - std::cos(theta)) / (theta * theta);
  return Mat3::Identity() + a * k + b * k * k;
}

Vec3 so3_log(const Mat3& rotation) {
  const Eigen::AngleAxisd aa(rotation);
  return aa.angle() * aa.axis();
}

Pose apply_increment(const Pose& pose, const Eigen::Matrix<double, 6, 1>& delta) {
  return Pose{so3_exp(delta.head<3>()) * pose.rotation, pose.translation + delta.tail<3>()};
}

// ---------------------------------------------------------------------------
// FOV camera

void CameraIntrinsics::validate() const {
  if (!(fu > 0.0) || !(fv > 0.0)) throw InvalidArgument("focal lengths must be positive");
  if (!(omega >= 0.0) || !(omega < std::numbers::pi)) {
    throw InvalidArgument("omega must lie in [0, pi)");
  }
  if (width <= 0 || height <= 0) throw InvalidArgument("image size must be positive");
}

namespace {

constexpr double kPinholeOmega = 1e-12;

// Radial factor g(r) = r'/r and h(r) = g'(r)/r for the FOV model.
struct RadialFactor {
  double g;
  double h;
};

RadialFactor radial_factor(double omega, double r) {
  if (omega < kPinholeOmega) return {1.0, 0.0};
  const double k = 2.0 * std::tan(omega / 2.0);
  const double x = k * r;
  if (x < 1e-3) {
    const double r2 = r * r;
    const double g = (k / omega) * (1.0 - x * x / 3.0 + x * x * x * x / 5.0);
    const double h = (-2.0 * k * k * k / 3.0 + 4.0 * k * k * k * k * k * r2 / 5.0) / omega;
    return {g, h};
  }
  const double at = std::atan(x);
  const double g = at / (omega * r);
  const double h = (x / (1.0 + x * x) - at) / (omega * r * r * r);
  return {g, h};
}

}  // namespace

std::optional<PixelPoint> try_project(const CameraIntrinsics& k, const Vec3& p) {
  if (!(p.z() > 0.0)) return std::nullopt;
  const double a = p.x() / p.z();
  const double b = p.y() / p.z();
  const double g = radial_factor(k.omega, std::sqrt(a * a + b * b)).g;
  return PixelPoint{k.u0 + k.fu * g * a, k.v0 + k.fv * g * b};
}

PixelPoint cam_project(const CameraIntrinsics& k, const Vec3& p) {
  auto px = try_project(k, p);
  if (!px) throw PointBehindCamera("point is not in front of the camera");
  return *px;
}

Eigen::Matrix<double, 2, 3> projection_jacobian(const CameraIntrinsics& k, const Vec3& p) {
  const double iz = 1.0 / p.z();
  const double a = p.x() * iz;
  const double b = p.y() * iz;
  const auto [g, h] = radial_factor(k.omega, std::sqrt(a * a + b * b));
  Eigen::Matrix2d d_ab;  // d(g a, g b) / d(a, b)
  d_ab << g + a * a * h, a * b * h, a * b * h, g + b * b * h;
  Eigen::Matrix<double, 2, 3> d_xyz;
  d_xyz << iz, 0.0, -a * iz, 0.0, iz, -b * iz;
  Eigen::Matrix<double, 2, 3> j = d_ab * d_xyz;
  j.row(0) *= k.fu;
  j.row(1) *= k.fv;
  return j;
}

Vec3 unproject(const CameraIntrinsics& k, const PixelPoint& px) {
  const double ad = (px.u - k.u0) / k.fu;
  const double bd = (px.v - k.v0) / k.fv;
  double factor = 1.0;
  if (k.omega >= kPinholeOmega) {
    const double kk = 2.0 * std::tan(k.omega / 2.0);
    const double rd = std::sqrt(ad * ad + bd * bd);
    if (rd * k.omega >= std::numbers::pi / 2.0) {
      throw InvalidArgument("pixel lies outside the camera field of view");
    }
    factor = rd > 1e-12 ? std::tan(rd * k.omega) / kk / rd : k.omega / kk;
  }
  return Vec3(ad * factor, bd * factor, 1.0).normalized();
}

// ---------------------------------------------------------------------------
// Triangulation and parallax

namespace {

void normal_equations(std::span<const Ray> rays, Mat3& a, Vec3& b) {
  a.setZero();
  b.setZero();
  for (const Ray& ray : rays) {
    const Mat3 p = Mat3::Identity() - ray.direction * ray.direction.transpose();
    a += p;
    b += p * ray.origin;
  }
}

}  // namespace

Vec3 triangulate_point(std::span<const Ray> rays) {
  if (rays.size() < 2) throw InvalidArgument("triangulation needs at least two rays");
  Mat3 a;
  Vec3 b;
  normal_equations(rays, a, b);
  const Eigen::SelfAdjointEigenSolver<Mat3> eig(a);
  const double lo = eig.eigenvalues()(0);
  const double hi = eig.eigenvalues()(2);
  if (!(lo > 0.0) || hi / lo > 1e10) {
    throw DegenerateGeometry("rays are parallel or nearly so");
  }
  return a.ldlt().solve(b);
}

double ray_distance_cost(std::span<const Ray> rays, const Vec3& x, Vec3* gradient) {
  double cost = 0.0;
  if (gradient) gradient->setZero();
  for (const Ray& ray : rays) {
    const Vec3 diff = x - ray.origin;
    const Vec3 perp = diff - ray.direction * ray.direction.dot(diff);
    cost += perp.squaredNorm();
    if (gradient) *gradient += 2.0 * perp;
  }
  return cost;
}

double ray_conditioning(std::span<const Ray> rays) {
  Mat3 a;
  Vec3 b;
  normal_equations(rays, a, b);
  return Eigen::SelfAdjointEigenSolver<Mat3>(a, Eigen::EigenvaluesOnly).eigenvalues()(0);
}

double parallax_deg(const Vec3& center_a, const Vec3& center_b, const Vec3& point) {
  const Vec3 ra = point - center_a;
  const Vec3 rb = point - center_b;
  const double na = ra.norm();
  const double nb = rb.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  // atan2 form stays accurate for tiny angles.
  const double angle = std::atan2(ra.cross(rb).norm(), ra.dot(rb));
  return angle * 180.0 / std::numbers::pi;
}

double parallax_deg(const Pose& cam_a, const Pose& cam_b, const Vec3& point) {
  return parallax_deg(cam_a.translation, cam_b.translation, point);
}

// ---------------------------------------------------------------------------
// Horn alignment

Similarity horn_align(std::span<const Vec3> source, std::span<const Vec3> target,
                      bool with_scale) {
  if (source.size() != target.size()) {
    throw InvalidArgument("alignment needs equally sized point sets");
  }
  const size_t n = source.size();
  if (n < 3) throw InvalidArgument("alignment needs at least three points");

  Vec3 mean_s = Vec3::Zero();
  Vec3 mean_t = Vec3::Zero();
  for (size_t i = 0; i < n; ++i) {
    mean_s += source[i];
    mean_t += target[i];
  }
  mean_s /= static_cast<double>(n);
  mean_t /= static_cast<double>(n);

  Mat3 m = Mat3::Zero();
  Mat3 cov_s = Mat3::Zero();
  Mat3 cov_t = Mat3::Zero();
  double norm_s = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const Vec3 s = source[i] - mean_s;
    const Vec3 t = target[i] - mean_t;
    m += s * t.transpose();
    cov_s += s * s.transpose();
    cov_t += t * t.transpose();
    norm_s += s.squaredNorm();
  }
  for (const Mat3* cov : {&cov_s, &cov_t}) {
    const Vec3 ev = Eigen::SelfAdjointEigenSolver<Mat3>(*cov, Eigen::EigenvaluesOnly).eigenvalues();
    if (!(ev(2) > 0.0) || ev(1) <= 1e-12 * ev(2)) {
      throw DegenerateGeometry("alignment points are collinear");
    }
  }

  const double sxx = m(0, 0), sxy = m(0, 1), sxz = m(0, 2);
  const double syx = m(1, 0), syy = m(1, 1), syz = m(1, 2);
  const double szx = m(2, 0), szy = m(2, 1), szz = m(2, 2);
  Eigen::Matrix4d nmat;
  nmat << sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
          syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
          szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
          sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz;
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> eig(nmat);
  const Eigen::Vector4d q = eig.eigenvectors().col(3);
  const Eigen::Quaterniond quat(q(0), q(1), q(2), q(3));

  Similarity out;
  out.rotation = quat.normalized().toRotationMatrix();
  if (with_scale) {
    double num = 0.0;
    for (size_t i = 0; i < n; ++i) {
      num += (out.rotation * (source[i] - mean_s)).dot(target[i] - mean_t);
    }
    out.scale = num / norm_s;
  }
  out.translation = mean_t - out.scale * (out.rotation * mean_s);
  return out;
}

Similarity horn_align(const Trajectory& est, const Trajectory& gt, bool with_scale) {
  if (est.size() != gt.size()) throw InvalidArgument("trajectories differ in length");
  std::vector<Vec3> a, b;
  a.reserve(est.size());
  b.reserve(gt.size());
  for (size_t i = 0; i < est.size(); ++i) {
    a.push_back(est[i].pose.translation);
    b.push_back(gt[i].pose.translation);
  }
  return horn_align(a, b, with_scale);
}

// ---------------------------------------------------------------------------
// Trajectory files

std::string format_pose_tum(const Pose& pose) {
  const Eigen::Quaterniond q = pose.quaternion();
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%.9f %.9f %.9f %.9f %.9f %.9f %.9f", pose.translation.x(),
                pose.translation.y(), pose.translation.z(), q.x(), q.y(), q.z(), q.w());
  return buf;
}

std::string format_trajectory(const Trajectory& trajectory) {
  std::ostringstream out;
  out << "# timestamp tx ty tz qx qy qz qw\n";
  char buf[64];
  for (const auto& sp : trajectory) {
    std::snprintf(buf, sizeof(buf), "%.6f ", sp.timestamp);
    out << buf << format_pose_tum(sp.pose) << '\n';
  }
  return out.str();
}

Trajectory parse_trajectory(const std::string& text) {
  Trajectory out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    double ts, tx, ty, tz, qx, qy, qz, qw;
    if (!(ls >> ts >> tx >> ty >> tz >> qx >> qy >> qz >> qw)) {
      throw FormatError("trajectory line " + std::to_string(line_no) + " is malformed");
    }
    out.push_back({ts, Pose::from_quaternion(Eigen::Quaterniond(qw, qx, qy, qz), Vec3(tx, ty, tz))});
  }
  return out;
}

Trajectory read_trajectory(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open trajectory file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_trajectory(ss.str());
}

void write_trajectory(const std::string& path, const Trajectory& trajectory) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write trajectory file " + path);
  out << format_trajectory(trajectory);
}

}  // namespace objslam
