#include <cmath>

#include <gtest/gtest.h>

#include "objslam/bundle_adjustment.h"
#include "objslam/errors.h"
#include "test_support.h"

namespace objslam {
namespace {

using testing::metric_centers;
using testing::synthetic_map;

// Metric camera offsets from the first keyframe; the map origin itself moves with the scale.
double max_center_error(const MapState& a, const MapState& b) {
  const auto ca = metric_centers(a);
  const auto cb = metric_centers(b);
  double worst = 0.0;
  for (size_t i = 0; i < ca.size(); ++i) worst = std::max(worst, ((ca[i] - ca[0]) - (cb[i] - cb[0])).norm());
  return worst;
}

double keyframe_rms(const MapState& map, uint32_t kid, const CameraIntrinsics& k) {
  const Keyframe& kf = map.keyframes.at(kid);
  double sq = 0.0;
  for (const auto& m : kf.measurements) {
    sq += reprojection_residual(kf.camera_pose, map.points.at(m.point_id).position, m.pixel, k).squaredNorm();
  }
  return std::sqrt(sq / static_cast<double>(kf.measurements.size()));
}

TEST(Residuals, Reprojection) {
  CameraIntrinsics k;
  const Pose cam{so3_exp(Vec3(0.1, 0.2, -0.1)), Vec3(0.3, -0.2, 0.1)};
  const Vec3 x = cam * Vec3(0.2, -0.1, 3.0);
  const PixelPoint px = cam_project(k, Vec3(0.2, -0.1, 3.0));
  EXPECT_LT(reprojection_residual(cam, x, px, k).norm(), 1e-9);
  const Vec2 off = reprojection_residual(cam, x, PixelPoint{px.u + 1.5, px.v - 2.0}, k);
  EXPECT_NEAR(off.x(), 1.5, 1e-9);
  EXPECT_NEAR(off.y(), -2.0, 1e-9);
  EXPECT_THROW(reprojection_residual(cam, cam * Vec3(0, 0, -1), px, k), PointBehindCamera);
  EXPECT_DOUBLE_EQ(reprojection_information(0), 1.0);
  EXPECT_DOUBLE_EQ(reprojection_information(2), 1.0 / 16.0);
}

TEST(Residuals, Alignment) {
  const Vec3 xo(0.1, -0.2, 0.05);
  EXPECT_LT(alignment_residual(Pose{}, 1.0, xo, xo).norm(), 1e-15);
  EXPECT_LT((alignment_residual(Pose{}, 2.0, xo, xo) + xo).norm(), 1e-15);
  const Pose two{so3_exp(Vec3(0.3, -0.1, 0.8)), Vec3(1.0, 2.0, -0.5)};
  // x_W in map units with metric = 0.5 * map.
  const Vec3 xw = 2.0 * (two * xo);
  EXPECT_LT(alignment_residual(two, 0.5, xo, xw).norm(), 1e-12);
}

TEST(Residuals, Huber) {
  EXPECT_EQ(huber(0.0, 5.991), 0.0);
  EXPECT_DOUBLE_EQ(huber(5.991, 5.991), 5.991);
  EXPECT_DOUBLE_EQ(huber(3.0, 5.991), 3.0);
  EXPECT_NEAR(huber(16.0, 5.991), 13.5902154883, 1e-9);
  // Linear growth in the residual norm above the threshold.
  EXPECT_NEAR(huber(400.0, 4.0) - huber(100.0, 4.0), 2.0 * 2.0 * 10.0, 1e-12);
}

TEST(Jacobians, ReprojectionMatchesFiniteDifferences) {
  Random rng(11);
  for (double omega : {0.0, 0.9}) {
    CameraIntrinsics k;
    k.omega = omega;
    for (int trial = 0; trial < 20; ++trial) {
      const Pose cw = testing::random_pose(rng, 0.5);
      const Vec3 x = cw.inverse() * Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 5));
      const auto jac = reprojection_jacobians(cw, x, k);
      const PixelPoint meas{0, 0};
      auto e = [&](const Pose& p, const Vec3& y) { return reprojection_residual(p.inverse(), y, meas, k); };
      const double h = 1e-6;
      for (int c = 0; c < 6; ++c) {
        Eigen::Matrix<double, 6, 1> d = Eigen::Matrix<double, 6, 1>::Zero();
        d(c) = h;
        const Vec2 num = (e(apply_increment(cw, d), x) - e(apply_increment(cw, -d), x)) / (2 * h);
        EXPECT_LT((num - jac.camera.col(c)).norm(), 1e-4 * std::max(1.0, num.norm())) << "camera col " << c;
      }
      for (int c = 0; c < 3; ++c) {
        const Vec3 d = Vec3::Unit(c) * h;
        const Vec2 num = (e(cw, x + d) - e(cw, x - d)) / (2 * h);
        EXPECT_LT((num - jac.point.col(c)).norm(), 1e-4 * std::max(1.0, num.norm())) << "point col " << c;
      }
    }
  }
}

TEST(Jacobians, AlignmentMatchesFiniteDifferences) {
  Random rng(12);
  for (int trial = 0; trial < 20; ++trial) {
    const Pose ow = testing::random_pose(rng, 2.0);
    const double s = rng.uniform(0.2, 3.0);
    const Vec3 x(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
    const Vec3 xo(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2));
    auto a = [&](const Pose& p, double sc, const Vec3& y) { return alignment_residual(p.inverse(), sc, xo, y); };
    const auto jac = alignment_jacobians(ow, s, x);
    const double h = 1e-6;
    for (int c = 0; c < 6; ++c) {
      Eigen::Matrix<double, 6, 1> d = Eigen::Matrix<double, 6, 1>::Zero();
      d(c) = h;
      const Vec3 num = (a(apply_increment(ow, d), s, x) - a(apply_increment(ow, -d), s, x)) / (2 * h);
      EXPECT_LT((num - jac.object.col(c)).norm(), 1e-6 * std::max(1.0, num.norm()));
    }
    for (int c = 0; c < 3; ++c) {
      const Vec3 d = Vec3::Unit(c) * h;
      const Vec3 num = (a(ow, s, x + d) - a(ow, s, x - d)) / (2 * h);
      EXPECT_LT((num - jac.point.col(c)).norm(), 1e-6 * std::max(1.0, num.norm()));
    }
    const Vec3 num = (a(ow, s * std::exp(h), x) - a(ow, s * std::exp(-h), x)) / (2 * h);
    EXPECT_LT((num - jac.log_scale).norm(), 1e-6 * std::max(1.0, num.norm()));
  }
}

TEST(JointBa, ExactMapIsUntouched) {
  auto sm = synthetic_map(1);
  EXPECT_LT(robust_objective(sm.map, sm.k, {}), 1e-20);
  const auto report = joint_bundle_adjust(sm.map, sm.k);
  EXPECT_TRUE(report.converged);
  EXPECT_LT(report.final_cost, 1e-20);
  EXPECT_LT(max_center_error(sm.map, sm.truth), 1e-12);
  EXPECT_NEAR(*sm.map.scale, 0.5, 1e-12);
}

TEST(JointBa, ConvergedSolutionIsAFixedPoint) {
  auto sm = synthetic_map(2, 0.5);
  joint_bundle_adjust(sm.map, sm.k);
  const MapState once = sm.map;
  joint_bundle_adjust(sm.map, sm.k);
  EXPECT_LT(max_center_error(sm.map, once), 1e-7);
  for (const auto& [pid, p] : sm.map.points) EXPECT_LT((p.position - once.points.at(pid).position).norm(), 1e-7);
  EXPECT_NEAR(*sm.map.scale, *once.scale, 1e-7);
}

TEST(JointBa, RecoversScaleAndPosesFromPerturbation) {
  auto sm = synthetic_map(3);
  sm.map = testing::perturb_map(sm.truth, 4);
  const Pose first_before = sm.map.keyframes.begin()->second.camera_pose;
  const auto report = joint_bundle_adjust(sm.map, sm.k);
  EXPECT_LT(report.final_cost, report.initial_cost);
  EXPECT_LT(max_center_error(sm.map, sm.truth), 1e-3);
  // Metric distance between the extreme keyframes fixes the scale check.
  const auto ce = metric_centers(sm.map);
  const auto ct = metric_centers(sm.truth);
  EXPECT_NEAR((ce.back() - ce.front()).norm() / (ct.back() - ct.front()).norm(), 1.0, 1e-3);
  for (const auto& [kid, kf] : sm.map.keyframes) {
    EXPECT_LT(rotation_angle_deg(kf.camera_pose.rotation.transpose() * sm.truth.keyframes.at(kid).camera_pose.rotation),
              1e-3);
  }
  // Gauge keyframe is bitwise unchanged.
  const Pose& first_after = sm.map.keyframes.begin()->second.camera_pose;
  EXPECT_TRUE((first_after.rotation.array() == first_before.rotation.array()).all());
  EXPECT_TRUE((first_after.translation.array() == first_before.translation.array()).all());
}

TEST(JointBa, CostHistoryIsMonotone) {
  for (uint64_t seed = 0; seed < 5; ++seed) {
    auto sm = synthetic_map(20 + seed, 1.0);
    sm.map = testing::perturb_map(sm.map, 40 + seed);
    const auto report = joint_bundle_adjust(sm.map, sm.k);
    ASSERT_GE(report.cost_history.size(), 2u);
    for (size_t i = 1; i < report.cost_history.size(); ++i) {
      EXPECT_LE(report.cost_history[i], report.cost_history[i - 1]);
    }
    EXPECT_NEAR(robust_objective(sm.map, sm.k, {}), report.final_cost, 1e-9 * std::max(1.0, report.final_cost));
  }
}

TEST(JointBa, HuberLimitsOneGrossOutlier) {
  auto sm = synthetic_map(5);
  sm.map = testing::perturb_map(sm.truth, 6);
  auto& m = sm.map.keyframes.rbegin()->second.measurements.front();
  m.pixel.u += 80.0;
  joint_bundle_adjust(sm.map, sm.k);
  const auto ct = metric_centers(sm.truth);
  const double extent = (ct.back() - ct.front()).norm();
  EXPECT_LT(max_center_error(sm.map, sm.truth), 0.01 * extent);
}

TEST(JointBa, WithoutAnchorsScaleIsLeftAlone) {
  auto sm = synthetic_map(7, 0.0, 6, 40, 0);
  sm.map = testing::perturb_map(sm.truth, 8);
  const double s = *sm.map.scale;
  const auto report = joint_bundle_adjust(sm.map, sm.k);
  EXPECT_EQ(report.alignment_terms, 0u);
  EXPECT_EQ(*sm.map.scale, s);
  EXPECT_LT(report.final_cost, 1e-6 * report.initial_cost);
}

TEST(LocalBa, WindowIsClampedAndLeadsWithTheKeyframe) {
  auto sm = synthetic_map(9, 0.0, 8);
  const auto w = local_window(sm.map, 5);
  ASSERT_EQ(w.size(), 5u);
  EXPECT_EQ(w.front(), 5u);
  EXPECT_EQ(local_window(sm.map, 5, 2).size(), 3u);
  auto small = synthetic_map(9, 0.0, 3);
  EXPECT_EQ(local_window(small.map, 2).size(), 3u);
}

TEST(LocalBa, NoiselessInsertionChangesNothing) {
  auto sm = synthetic_map(10, 0.0, 6);
  const auto report = local_bundle_adjust(sm.map, 5, sm.k);
  EXPECT_LT(report.final_cost, 1e-20);
  EXPECT_EQ(report.alignment_terms, 0u);
  EXPECT_LT(max_center_error(sm.map, sm.truth), 1e-12);
}

TEST(LocalBa, PerturbedNewKeyframeImproves) {
  auto sm = synthetic_map(11, 0.3, 6);
  Keyframe& last = sm.map.keyframes.at(5);
  last.camera_pose.rotation = so3_exp(Vec3(0.005, -0.004, 0.003)) * last.camera_pose.rotation;
  last.camera_pose.translation += Vec3(0.03, -0.02, 0.01);
  const Pose first_before = sm.map.keyframes.at(0).camera_pose;
  const double before = keyframe_rms(sm.map, 5, sm.k);
  local_bundle_adjust(sm.map, 5, sm.k);
  EXPECT_LT(keyframe_rms(sm.map, 5, sm.k), 0.5 * before);
  EXPECT_LT(keyframe_rms(sm.map, 5, sm.k), 1.0);
  const Pose& first_after = sm.map.keyframes.at(0).camera_pose;
  EXPECT_TRUE((first_after.rotation.array() == first_before.rotation.array()).all());
  EXPECT_TRUE((first_after.translation.array() == first_before.translation.array()).all());
}

}  // namespace
}  // namespace objslam
