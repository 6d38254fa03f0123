// EPnP linear initialisation (Lepetit, Moreno-Noguer, Fua) followed by
// Gauss-Newton refinement of the reprojection error under the FOV model.

#include <array>
#include <cmath>
#include <limits>

#include <Eigen/Dense>

#include "objslam/errors.h"
#include "objslam/geometry.h"

namespace objslam {
namespace {

using Mat12 = Eigen::Matrix<double, 12, 12>;
using Vec12 = Eigen::Matrix<double, 12, 1>;
using L6x10 = Eigen::Matrix<double, 6, 10>;
using Vec6 = Eigen::Matrix<double, 6, 1>;

// Points with a negligible third principal spread are handled by the planar solver.
constexpr double kPlanarRatio = 1e-8;

struct Epnp {
  std::vector<Vec3> world;
  std::vector<Eigen::Vector2d> image;  // normalised pinhole coordinates
  std::array<Vec3, 4> control_world;
  std::vector<Eigen::Vector4d> alphas;

  void choose_control_points() {
    const size_t n = world.size();
    Vec3 c0 = Vec3::Zero();
    for (const auto& p : world) c0 += p;
    c0 /= static_cast<double>(n);
    Mat3 cov = Mat3::Zero();
    for (const auto& p : world) cov += (p - c0) * (p - c0).transpose();
    const Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    const Vec3 ev = eig.eigenvalues();  // ascending
    if (!(ev(2) > 0.0) || ev(1) < 1e-12 * ev(2)) {
      throw DegenerateGeometry("PnP model points are collinear");
    }
    control_world[0] = c0;
    for (int i = 0; i < 3; ++i) {
      const int col = 2 - i;  // largest spread first
      control_world[i + 1] = c0 + std::sqrt(ev(col) / static_cast<double>(n)) * eig.eigenvectors().col(col);
    }
  }

  void compute_barycentric() {
    Mat3 cc;
    for (int i = 0; i < 3; ++i) cc.col(i) = control_world[i + 1] - control_world[0];
    const Mat3 inv = cc.inverse();
    alphas.clear();
    for (const auto& p : world) {
      const Vec3 a = inv * (p - control_world[0]);
      alphas.emplace_back(1.0 - a.sum(), a(0), a(1), a(2));
    }
  }

  Mat12 mtm() const {
    Mat12 out = Mat12::Zero();
    for (size_t i = 0; i < world.size(); ++i) {
      Eigen::Matrix<double, 2, 12> rows = Eigen::Matrix<double, 2, 12>::Zero();
      for (int j = 0; j < 4; ++j) {
        const double a = alphas[i](j);
        rows(0, 3 * j) = a;
        rows(0, 3 * j + 2) = -a * image[i].x();
        rows(1, 3 * j + 1) = a;
        rows(1, 3 * j + 2) = -a * image[i].y();
      }
      out.noalias() += rows.transpose() * rows;
    }
    return out;
  }
};

constexpr std::array<std::pair<int, int>, 6> kPairs = {{{0, 1}, {0, 2}, {0, 3}, {1, 2}, {1, 3}, {2, 3}}};

L6x10 compute_l6x10(const std::array<Vec12, 4>& v) {
  L6x10 l;
  for (int row = 0; row < 6; ++row) {
    const auto [a, b] = kPairs[row];
    std::array<Vec3, 4> dv;
    for (int i = 0; i < 4; ++i) dv[i] = v[i].segment<3>(3 * a) - v[i].segment<3>(3 * b);
    l(row, 0) = dv[0].dot(dv[0]);
    l(row, 1) = 2.0 * dv[0].dot(dv[1]);
    l(row, 2) = dv[1].dot(dv[1]);
    l(row, 3) = 2.0 * dv[0].dot(dv[2]);
    l(row, 4) = 2.0 * dv[1].dot(dv[2]);
    l(row, 5) = dv[2].dot(dv[2]);
    l(row, 6) = 2.0 * dv[0].dot(dv[3]);
    l(row, 7) = 2.0 * dv[1].dot(dv[3]);
    l(row, 8) = 2.0 * dv[2].dot(dv[3]);
    l(row, 9) = dv[3].dot(dv[3]);
  }
  return l;
}

Vec6 compute_rho(const std::array<Vec3, 4>& cws) {
  Vec6 rho;
  for (int row = 0; row < 6; ++row) {
    const auto [a, b] = kPairs[row];
    rho(row) = (cws[a] - cws[b]).squaredNorm();
  }
  return rho;
}

template <int Cols>
Eigen::Matrix<double, Cols, 1> least_squares(const Eigen::Matrix<double, 6, Cols>& a, const Vec6& b) {
  return a.colPivHouseholderQr().solve(b);
}

Eigen::Vector4d betas_approx_1(const L6x10& l, const Vec6& rho) {
  Eigen::Matrix<double, 6, 4> a;
  a << l.col(0), l.col(1), l.col(3), l.col(6);
  const Eigen::Vector4d b4 = least_squares<4>(a, rho);
  Eigen::Vector4d betas;
  if (b4(0) < 0) {
    betas(0) = std::sqrt(-b4(0));
    betas.tail<3>() = -b4.tail<3>() / betas(0);
  } else {
    betas(0) = std::sqrt(b4(0));
    betas.tail<3>() = b4.tail<3>() / betas(0);
  }
  return betas;
}

Eigen::Vector4d betas_approx_2(const L6x10& l, const Vec6& rho) {
  Eigen::Matrix<double, 6, 3> a;
  a << l.col(0), l.col(1), l.col(2);
  const Vec3 b3 = least_squares<3>(a, rho);
  Eigen::Vector4d betas = Eigen::Vector4d::Zero();
  if (b3(0) < 0) {
    betas(0) = std::sqrt(-b3(0));
    betas(1) = b3(2) < 0 ? std::sqrt(-b3(2)) : 0.0;
  } else {
    betas(0) = std::sqrt(b3(0));
    betas(1) = b3(2) > 0 ? std::sqrt(b3(2)) : 0.0;
  }
  if (b3(1) < 0) betas(0) = -betas(0);
  return betas;
}

Eigen::Vector4d betas_approx_3(const L6x10& l, const Vec6& rho) {
  Eigen::Matrix<double, 6, 5> a;
  a << l.col(0), l.col(1), l.col(2), l.col(3), l.col(4);
  const Eigen::Matrix<double, 5, 1> b5 = least_squares<5>(a, rho);
  Eigen::Vector4d betas = Eigen::Vector4d::Zero();
  if (b5(0) < 0) {
    betas(0) = std::sqrt(-b5(0));
    betas(1) = b5(2) < 0 ? std::sqrt(-b5(2)) : 0.0;
  } else {
    betas(0) = std::sqrt(b5(0));
    betas(1) = b5(2) > 0 ? std::sqrt(b5(2)) : 0.0;
  }
  if (b5(1) < 0) betas(0) = -betas(0);
  betas(2) = betas(0) != 0.0 ? b5(3) / betas(0) : 0.0;
  return betas;
}

void gauss_newton_betas(const L6x10& l, const Vec6& rho, Eigen::Vector4d& betas) {
  for (int iter = 0; iter < 5; ++iter) {
    Eigen::Matrix<double, 6, 4> a;
    Vec6 residual;
    const double b0 = betas(0), b1 = betas(1), b2 = betas(2), b3 = betas(3);
    for (int i = 0; i < 6; ++i) {
      const auto r = l.row(i);
      a(i, 0) = 2 * r(0) * b0 + r(1) * b1 + r(3) * b2 + r(6) * b3;
      a(i, 1) = r(1) * b0 + 2 * r(2) * b1 + r(4) * b2 + r(7) * b3;
      a(i, 2) = r(3) * b0 + r(4) * b1 + 2 * r(5) * b2 + r(8) * b3;
      a(i, 3) = r(6) * b0 + r(7) * b1 + r(8) * b2 + 2 * r(9) * b3;
      residual(i) = rho(i) - (r(0) * b0 * b0 + r(1) * b0 * b1 + r(2) * b1 * b1 + r(3) * b0 * b2 +
                              r(4) * b1 * b2 + r(5) * b2 * b2 + r(6) * b0 * b3 + r(7) * b1 * b3 +
                              r(8) * b2 * b3 + r(9) * b3 * b3);
    }
    betas += a.colPivHouseholderQr().solve(residual);
  }
}

// Rigid transform mapping `src` onto `dst` (Umeyama without scale).
Pose absolute_orientation(const std::vector<Vec3>& src, const std::vector<Vec3>& dst) {
  Vec3 ms = Vec3::Zero(), md = Vec3::Zero();
  for (size_t i = 0; i < src.size(); ++i) {
    ms += src[i];
    md += dst[i];
  }
  ms /= static_cast<double>(src.size());
  md /= static_cast<double>(dst.size());
  Mat3 h = Mat3::Zero();
  for (size_t i = 0; i < src.size(); ++i) h += (dst[i] - md) * (src[i] - ms).transpose();
  const Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 d = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) d(2, 2) = -1.0;
  const Mat3 r = svd.matrixU() * d * svd.matrixV().transpose();
  return Pose{r, md - r * ms};
}

double reprojection_rms(std::span<const Correspondence2D3D> corrs, const CameraIntrinsics& k,
                        const Pose& pose) {
  double sum = 0.0;
  for (const auto& c : corrs) {
    const auto px = try_project(k, pose * c.point);
    if (!px) return std::numeric_limits<double>::infinity();
    sum += (px->vec() - c.pixel.vec()).squaredNorm();
  }
  return std::sqrt(sum / static_cast<double>(corrs.size()));
}

double reprojection_cost(std::span<const Correspondence2D3D> corrs, const CameraIntrinsics& k,
                         const Pose& pose) {
  double sum = 0.0;
  for (const auto& c : corrs) {
    const auto px = try_project(k, pose * c.point);
    if (!px) return std::numeric_limits<double>::infinity();
    sum += (px->vec() - c.pixel.vec()).squaredNorm();
  }
  return sum;
}

void check_arity(std::span<const Correspondence2D3D> corrs) {
  if (corrs.size() < 4) {
    throw InvalidArgument("PnP needs at least 4 correspondences, got " +
                          std::to_string(corrs.size()));
  }
}

// Homography between the model plane and normalised image coordinates,
// decomposed into a rotation and translation.
Pose planar_pose(std::span<const Correspondence2D3D> corrs, const CameraIntrinsics& k,
                 const Vec3& origin, const Mat3& axes) {
  const size_t n = corrs.size();
  Eigen::MatrixXd a(2 * n, 9);
  // Condition plane coordinates for the DLT.
  std::vector<Eigen::Vector2d> plane(n), img(n);
  double spread = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const Vec3 local = axes.transpose() * (corrs[i].point - origin);
    plane[i] = local.head<2>();
    spread += plane[i].norm();
    const Vec3 b = unproject(k, corrs[i].pixel);
    if (b.z() <= 1e-9) throw DegenerateGeometry("bearing outside the forward hemisphere");
    img[i] = b.head<2>() / b.z();
  }
  spread = spread > 0.0 ? spread / static_cast<double>(n) : 1.0;
  for (size_t i = 0; i < n; ++i) {
    const double x = plane[i].x() / spread, y = plane[i].y() / spread;
    const double u = img[i].x(), v = img[i].y();
    a.row(2 * i) << x, y, 1, 0, 0, 0, -u * x, -u * y, -u;
    a.row(2 * i + 1) << 0, 0, 0, x, y, 1, -v * x, -v * y, -v;
  }
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::Matrix<double, 9, 1> h = svd.matrixV().col(8);
  Mat3 hm;
  hm << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  hm.col(0) /= spread;
  hm.col(1) /= spread;
  const double norm = 0.5 * (hm.col(0).norm() + hm.col(1).norm());
  if (!(norm > 0.0)) throw DegenerateGeometry("planar PnP homography is degenerate");
  hm /= norm;
  if (hm(2, 2) < 0) hm = -hm;  // plane origin in front of the camera
  Mat3 r;
  r.col(0) = hm.col(0);
  r.col(1) = hm.col(1);
  r.col(2) = hm.col(0).cross(hm.col(1));
  const Eigen::JacobiSVD<Mat3> rs(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 fix = Mat3::Identity();
  if ((rs.matrixU() * rs.matrixV().transpose()).determinant() < 0) fix(2, 2) = -1.0;
  const Mat3 r_cp = rs.matrixU() * fix * rs.matrixV().transpose();
  const Pose camera_from_plane{r_cp, hm.col(2)};
  const Pose plane_from_model{axes.transpose(), -(axes.transpose() * origin)};
  return camera_from_plane * plane_from_model;
}

}  // namespace

Pose epnp(std::span<const Correspondence2D3D> corrs, const CameraIntrinsics& k) {
  check_arity(corrs);
  Epnp solver;
  for (const auto& c : corrs) {
    const Vec3 b = unproject(k, c.pixel);
    if (b.z() <= 1e-9) throw DegenerateGeometry("bearing outside the forward hemisphere");
    solver.world.push_back(c.point);
    solver.image.emplace_back(b.x() / b.z(), b.y() / b.z());
  }
  {
    Vec3 c0 = Vec3::Zero();
    for (const auto& p : solver.world) c0 += p;
    c0 /= static_cast<double>(solver.world.size());
    Mat3 cov = Mat3::Zero();
    for (const auto& p : solver.world) cov += (p - c0) * (p - c0).transpose();
    const Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
    const Vec3 ev = eig.eigenvalues();
    if (ev(2) > 0.0 && ev(1) >= 1e-12 * ev(2) && ev(0) < kPlanarRatio * ev(2)) {
      Mat3 axes;
      axes << eig.eigenvectors().col(2), eig.eigenvectors().col(1), eig.eigenvectors().col(0);
      if (axes.determinant() < 0) axes.col(2) = -axes.col(2);
      return planar_pose(corrs, k, c0, axes);
    }
  }
  solver.choose_control_points();
  solver.compute_barycentric();

  const Eigen::SelfAdjointEigenSolver<Mat12> eig(solver.mtm());
  std::array<Vec12, 4> v;  // v[0] spans the smallest eigenvalue
  for (int i = 0; i < 4; ++i) v[i] = eig.eigenvectors().col(i);

  const L6x10 l = compute_l6x10(v);
  const Vec6 rho = compute_rho(solver.control_world);

  std::array<Eigen::Vector4d, 3> candidates = {betas_approx_1(l, rho), betas_approx_2(l, rho),
                                               betas_approx_3(l, rho)};
  Pose best;
  double best_err = std::numeric_limits<double>::infinity();
  for (auto& betas : candidates) {
    gauss_newton_betas(l, rho, betas);
    std::array<Vec3, 4> ccs;
    for (int j = 0; j < 4; ++j) {
      ccs[j].setZero();
      for (int i = 0; i < 4; ++i) ccs[j] += betas(i) * v[i].segment<3>(3 * j);
    }
    std::vector<Vec3> pcs;
    pcs.reserve(solver.world.size());
    for (const auto& a : solver.alphas) {
      pcs.push_back(a(0) * ccs[0] + a(1) * ccs[1] + a(2) * ccs[2] + a(3) * ccs[3]);
    }
    if (pcs[0].z() < 0) {
      for (auto& p : pcs) p = -p;
    }
    const Pose pose = absolute_orientation(solver.world, pcs);
    if (!pose.rotation.allFinite() || !pose.translation.allFinite()) continue;
    const double err = reprojection_rms(corrs, k, pose);
    if (err < best_err) {
      best_err = err;
      best = pose;
    }
  }
  if (!std::isfinite(best_err)) throw NonConvergence("EPnP produced no valid pose");
  return best;
}

Pose refine_pnp(std::span<const Correspondence2D3D> corrs, const CameraIntrinsics& k,
                const Pose& initial, int max_iterations) {
  check_arity(corrs);
  Pose pose = initial;
  double cost = reprojection_cost(corrs, k, pose);
  if (!std::isfinite(cost)) throw NonConvergence("initial PnP pose puts points behind the camera");
  double lambda = 1e-6;
  for (int iter = 0; iter < max_iterations; ++iter) {
    Eigen::Matrix<double, 6, 6> h = Eigen::Matrix<double, 6, 6>::Zero();
    Vec6 g = Vec6::Zero();
    for (const auto& c : corrs) {
      const Vec3 rx = pose.rotation * c.point;
      const Vec3 pc = rx + pose.translation;
      const Eigen::Matrix<double, 2, 3> jp = projection_jacobian(k, pc);
      Eigen::Matrix<double, 2, 6> j;
      j.leftCols<3>() = -jp * skew(rx);
      j.rightCols<3>() = jp;
      const Eigen::Vector2d r = cam_project(k, pc).vec() - c.pixel.vec();
      h.noalias() += j.transpose() * j;
      g.noalias() += j.transpose() * r;
    }
    bool accepted = false;
    while (lambda < 1e8) {
      Eigen::Matrix<double, 6, 6> damped = h;
      damped.diagonal() += lambda * (h.diagonal().array() + 1e-9).matrix();
      const Vec6 delta = damped.ldlt().solve(-g);
      const Pose candidate = apply_increment(pose, delta);
      const double new_cost = reprojection_cost(corrs, k, candidate);
      if (new_cost <= cost) {
        const double decrease = cost - new_cost;
        pose = candidate;
        cost = new_cost;
        lambda = std::max(lambda / 10.0, 1e-12);
        accepted = true;
        if (decrease <= 1e-12 * (cost + 1e-12) || delta.norm() < 1e-12) return pose;
        break;
      }
      lambda *= 10.0;
    }
    if (!accepted) break;
  }
  return pose;
}

Pose solve_pnp(std::span<const Correspondence2D3D> corrs, const CameraIntrinsics& k) {
  const Pose init = epnp(corrs, k);
  Pose pose = refine_pnp(corrs, k, init);
  if (!pose.rotation.allFinite() || !pose.translation.allFinite()) {
    throw NonConvergence("PnP refinement diverged");
  }
  return pose;
}

}  // namespace objslam
