// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit when a hard
// criterion fails. Criterion 8 only warns.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "objslam/bundle_adjustment.h"
#include "objslam/database.h"
#include "objslam/errors.h"
#include "objslam/evaluation.h"
#include "objslam/object_slam.h"
#include "objslam/pipeline.h"
#include "objslam/recognition.h"
#include "objslam/scene.h"
#include "test_support.h"

namespace objslam {
namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

BowVector random_bow(Random& rng, int nnz, int vocab) {
  BowVector v;
  while (static_cast<int>(v.size()) < nnz) v[static_cast<uint32_t>(rng.uniform_index(vocab))] = rng.uniform(0.01, 1.0);
  double sum = 0.0;
  for (const auto& [w, x] : v) sum += x;
  for (auto& [w, x] : v) x /= sum;
  return v;
}

// 1. Shared-word KL plus the v-only term equals the dense KL.
Outcome kl_identity() {
  Random rng(101);
  const double eps = 1e-6;
  std::vector<std::pair<BowVector, BowVector>> pairs;
  for (int i = 0; i < 1000; ++i) {
    pairs.emplace_back(random_bow(rng, 1 + static_cast<int>(rng.uniform_index(80)), 400),
                       random_bow(rng, 1 + static_cast<int>(rng.uniform_index(80)), 400));
  }
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (const auto& [v, w] : pairs) {
    double v_term = 0.0;
    for (const auto& [i, vi] : v) v_term += vi * std::log(vi / eps);
    worst = std::max(worst, std::abs(kl_score(v, w, eps) + v_term - kl_divergence_full(v, w, eps)));
  }
  const double t = seconds_since(t0);
  return {worst < 1e-9 && t < 1.0, fmt("1000 pairs, max |diff| %.3g, %.3f s", worst, t)};
}

// 2. Clean single-object queries against 100 models.
Outcome retrieval() {
  const auto t0 = Clock::now();
  Config c;
  c.scene.seed = 202;
  c.scene.num_models = 100;
  c.scene.num_instances = 1;
  c.scene.num_frames = 1;
  c.scene.landmarks = 10;
  auto w = testing::make_world(c);
  Random rng(203);
  int kl_hits = 0, l1_hits = 0, total = 0;
  for (int q = 0; q < 300; ++q) {
    const RawModel& m = w->scene.models[q % w->scene.models.size()];
    // One side of the object: points whose direction lies within 70 degrees of a random view.
    const Vec3 view = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
    Vec3 centroid = Vec3::Zero();
    for (const auto& p : m.points) centroid += p.position;
    centroid /= static_cast<double>(m.points.size());
    std::vector<BinaryDescriptor> ds;
    for (const auto& p : m.points) {
      if ((p.position - centroid).normalized().dot(view) < std::cos(70.0 * M_PI / 180.0)) continue;
      const auto& d = p.descriptors[rng.uniform_index(p.descriptors.size())];
      ds.push_back(flip_random_bits(d, c.scene.descriptor_noise_bits, rng));
    }
    if (ds.empty()) continue;
    const BowVector v = w->vocab->to_bow(ds);
    auto hit = [&](Metric metric) {
      for (const auto& cand : w->db->query(v, 10, metric)) {
        if (cand.model_id == m.id) return true;
      }
      return false;
    };
    kl_hits += hit(Metric::kKl);
    l1_hits += hit(Metric::kL1);
    ++total;
  }
  const double t = seconds_since(t0);
  const double kl = static_cast<double>(kl_hits) / total;
  const double l1 = static_cast<double>(l1_hits) / total;
  return {total == 300 && kl >= 0.95 && kl >= l1 && t < 30.0,
          fmt("%d queries, top-10 recall KL %.3f L1 %.3f, %.1f s", total, kl, l1, t)};
}

// 3. Distance-weighted sampling against the fixed distance ordering.
Outcome disac_vs_ordered() {
  const auto t0 = Clock::now();
  CameraIntrinsics k;
  Random rng(303);
  int disac_ok = 0, ordered_ok = 0;
  const int trials = 1000;
  for (int t = 0; t < trials; ++t) {
    const Pose truth{testing::random_rotation(rng), Vec3(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2),
                                                         rng.uniform(1.5, 3.0))};
    std::vector<Correspondence2D3D> corrs;
    std::vector<int> dist;
    for (int i = 0; i < 8; ++i) {
      const Vec3 x(rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15));
      PixelPoint px = cam_project(k, truth * x);
      px.u += 0.5 * rng.normal();
      px.v += 0.5 * rng.normal();
      corrs.push_back({px, x});
      dist.push_back(rng.uniform_int(10, 45));
    }
    for (int i = 0; i < 8; ++i) {
      const Vec3 x(rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15));
      corrs.push_back({PixelPoint{rng.uniform(0, k.width), rng.uniform(0, k.height)}, x});
      dist.push_back(rng.uniform_int(5, 25));
    }
    auto good = [&](const std::optional<PoseHypothesis>& h) {
      if (!h) return false;
      const double r = rotation_angle_deg(h->pose.rotation.transpose() * truth.rotation);
      return r < 2.0 && (h->pose.translation - truth.translation).norm() < 0.05 * truth.translation.z();
    };
    Random trial_rng(1000 + t);
    disac_ok += good(disac_verify(corrs, dist, k, trial_rng, 50));
    ordered_ok += good(ordered_subset_verify(corrs, dist, k, 50));
  }
  const double p1 = static_cast<double>(disac_ok) / trials;
  const double p2 = static_cast<double>(ordered_ok) / trials;
  const double pooled = (p1 + p2) / 2.0;
  const double se = std::sqrt(pooled * (1.0 - pooled) * 2.0 / trials);
  const double z = se > 0.0 ? (p1 - p2) / se : 0.0;
  const double secs = seconds_since(t0);
  return {z > 3.0 && secs < 60.0,
          fmt("success DISAC %.3f vs ordered %.3f over %d trials, z = %.2f, %.1f s", p1, p2, trials, z, secs)};
}

// 4. Analytic Jacobians and monotone LM.
Outcome ba_correctness() {
  Random rng(404);
  double worst = 0.0;
  const double h = 1e-6;
  auto rel = [](const Eigen::MatrixXd& a, const Eigen::MatrixXd& num) {
    return (a - num).norm() / std::max(num.norm(), 1e-12);
  };
  for (int s = 0; s < 100; ++s) {
    CameraIntrinsics k;
    k.omega = rng.uniform(0.0, 1.0);
    const Pose cw = testing::random_pose(rng, 0.5);
    const Vec3 x = cw.inverse() * Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 5));
    const PixelPoint meas{0, 0};
    auto e = [&](const Pose& p, const Vec3& y) { return reprojection_residual(p.inverse(), y, meas, k); };
    const auto rj = reprojection_jacobians(cw, x, k);
    Eigen::Matrix<double, 2, 6> nc;
    Eigen::Matrix<double, 2, 3> np;
    for (int c = 0; c < 6; ++c) {
      Eigen::Matrix<double, 6, 1> d = Eigen::Matrix<double, 6, 1>::Zero();
      d(c) = h;
      nc.col(c) = (e(apply_increment(cw, d), x) - e(apply_increment(cw, -d), x)) / (2 * h);
    }
    for (int c = 0; c < 3; ++c) np.col(c) = (e(cw, x + Vec3::Unit(c) * h) - e(cw, x - Vec3::Unit(c) * h)) / (2 * h);
    worst = std::max({worst, rel(rj.camera, nc), rel(rj.point, np)});

    const Pose ow = testing::random_pose(rng, 2.0);
    const double sc = rng.uniform(0.2, 3.0);
    const Vec3 xo(rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2));
    auto a = [&](const Pose& p, double scl, const Vec3& y) { return alignment_residual(p.inverse(), scl, xo, y); };
    const auto aj = alignment_jacobians(ow, sc, x);
    Eigen::Matrix<double, 3, 6> no;
    Eigen::Matrix3d nx;
    for (int c = 0; c < 6; ++c) {
      Eigen::Matrix<double, 6, 1> d = Eigen::Matrix<double, 6, 1>::Zero();
      d(c) = h;
      no.col(c) = (a(apply_increment(ow, d), sc, x) - a(apply_increment(ow, -d), sc, x)) / (2 * h);
    }
    for (int c = 0; c < 3; ++c) nx.col(c) = (a(ow, sc, x + Vec3::Unit(c) * h) - a(ow, sc, x - Vec3::Unit(c) * h)) / (2 * h);
    const Vec3 nl = (a(ow, sc * std::exp(h), x) - a(ow, sc * std::exp(-h), x)) / (2 * h);
    worst = std::max({worst, rel(aj.object, no), rel(aj.point, nx), rel(aj.log_scale, nl)});
  }
  int monotone = 0;
  for (uint64_t p = 0; p < 20; ++p) {
    auto sm = testing::synthetic_map(500 + p, 1.0);
    sm.map = testing::perturb_map(sm.map, 600 + p);
    const BaReport r = joint_bundle_adjust(sm.map, sm.k);
    bool ok = r.cost_history.size() >= 2;
    for (size_t i = 1; i < r.cost_history.size(); ++i) ok = ok && r.cost_history[i] <= r.cost_history[i - 1];
    monotone += ok;
  }
  return {worst < 1e-4 && monotone == 20,
          fmt("max relative Jacobian error %.2e over 100 states, %d/20 problems monotone", worst, monotone)};
}

struct SceneRun {
  EvalReport report;
  double seconds = 0.0;
  std::string map_text;
};

SceneRun run_scene(const Config& config, const InjectionHook& hook = {}) {
  const auto t0 = Clock::now();
  auto w = testing::make_world(config);
  const PipelineResult r = run_pipeline(*w->vocab, *w->db, w->scene.frames, w->scene.tracks, config, hook);
  SceneRun out;
  out.report = evaluate(r.map, r.detections, w->scene.truth);
  out.seconds = seconds_since(t0);
  out.map_text = format_map(r.map);
  return out;
}

// 5. Scale and trajectory on the default scene, with and without noise.
Outcome scale_recovery() {
  Config clean;
  clean.scene.pixel_noise = 0.0;
  clean.scene.descriptor_noise_bits = 0;
  const SceneRun a = run_scene(clean);
  const SceneRun b = run_scene(Config{});
  const double ea = a.report.scale_error.value_or(1.0);
  const double eb = b.report.scale_error.value_or(1.0);
  const double ate_b = b.report.ate_rmse / std::max(b.report.trajectory_extent, 1e-12);
  const bool ok = a.report.scale_error && b.report.scale_error && ea < 1e-3 && eb < 0.05 &&
                  a.report.ate_rmse < 1e-3 && ate_b < 0.01 && a.seconds < 120.0 && b.seconds < 120.0;
  return {ok, fmt("clean: scale error %.2e, ATE %.2e, %.1f s; noisy: scale error %.2e (%.2e against the aligned map "
                  "units), ATE %.2f%% of extent, %.1f s",
                  ea, a.report.ate_rmse, a.seconds, eb, b.report.aligned_scale_error.value_or(1.0), 100.0 * ate_b,
                  b.seconds)};
}

Config short_config() {
  Config c;
  c.scene.num_frames = 60;
  c.scene.landmarks = 150;
  c.scene.corpus_images = 100;
  return c;
}

// 6. Spurious detections injected into every other frame.
Outcome gatekeeping() {
  const auto t0 = Clock::now();
  const Config c = short_config();
  auto w = testing::make_world(c);
  const std::vector<uint32_t> ids = w->db->model_ids();
  size_t false_instances = 0, injected = 0, real = 0;
  for (uint64_t run = 0; run < 50; ++run) {
    Random rng(7000 + run);
    InjectionHook hook = [&](const Frame& f, const MapState&, std::vector<Observation>& obs) {
      if (rng.uniform() < 0.5) return;
      const ObjectModel& m = w->db->model(ids[rng.uniform_index(ids.size())]);
      obs.push_back(make_spurious_observation(m, f, c.camera, rng));
      ++injected;
    };
    const PipelineResult r = run_pipeline(*w->vocab, *w->db, w->scene.frames, w->scene.tracks, c, hook);
    const EvalReport rep = evaluate(r.map, r.detections, w->scene.truth);
    false_instances += rep.false_instances;
    real += rep.instances.size() - rep.false_instances;
  }
  return {false_instances == 0, fmt("50 runs, %zu spurious detections injected, %zu false instances, %zu true "
                                    "instances triangulated, %.1f s",
                                    injected, false_instances, real, seconds_since(t0))};
}

// 7. Two clean views of a random object at a prescribed separation.
struct GateRig {
  ObjectModel model;
  Pose object;
  double distance;
  CameraIntrinsics k;

  explicit GateRig(Random& rng) {
    for (int i = 0; i < 10; ++i) {
      model.points.push_back(Vec3(rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15), rng.uniform(-0.15, 0.15)));
    }
    for (const auto& p : model.points) model.centroid += p;
    model.centroid /= 10.0;
    for (const auto& p : model.points) model.radius = std::max(model.radius, (p - model.centroid).norm());
    object = Pose{testing::random_rotation(rng), Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), 0)};
    distance = rng.uniform(1.5, 3.0);
  }

  Pose camera(double az_deg) const {
    const double a = az_deg * M_PI / 180.0;
    return look_at(object.translation + distance * Vec3(std::cos(a), std::sin(a), 0.3), object.translation);
  }

  Observation observe(double az_deg, uint32_t frame, int n_points) const {
    const Pose wc = camera(az_deg);
    Observation o;
    o.frame_id = frame;
    o.timestamp = 0.1 * frame;
    o.camera_pose = Pose{wc.rotation, 2.0 * wc.translation};
    o.object_in_camera = wc.inverse() * object;
    for (int p = 0; p < n_points; ++p) {
      o.matches.push_back({static_cast<uint32_t>(p), static_cast<uint32_t>(p),
                           cam_project(k, o.object_in_camera * model.points[p]), 0, 0});
    }
    return o;
  }

  // Smallest and largest per-point parallax between two azimuths.
  std::pair<double, double> parallax_range(double a0, double a1, int n_points) const {
    double lo = 1e9, hi = 0.0;
    for (int p = 0; p < n_points; ++p) {
      const double x = parallax_deg(camera(a0).translation, camera(a1).translation, object * model.points[p]);
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
    return {lo, hi};
  }

  bool triangulates(std::vector<double> azimuths, int n_points) const {
    ObjectInstance inst;
    inst.id = 0;
    for (size_t i = 0; i < azimuths.size(); ++i) inst.observations.push_back(observe(azimuths[i], i, n_points));
    MapState map;
    return try_triangulate(map, inst, model, k, ObjectSlamParams{}).has_value();
  }
};

Outcome triangulation_gates() {
  Random rng(707);
  int four = 0, narrow = 0, wide = 0;
  const int trials = 200;
  double narrow_max = 0.0, wide_min = 1e9;
  for (int t = 0; t < trials; ++t) {
    const GateRig rig(rng);
    const double a0 = rng.uniform(0, 360);
    four += rig.triangulates({a0, a0 + rng.uniform(5, 30), a0 + 40}, 4);
    narrow_max = std::max(narrow_max, rig.parallax_range(a0, a0 + 2.0, 5).second);
    narrow += rig.triangulates({a0, a0 + 2.0}, 5);
    double sep;
    do {
      sep = rng.uniform(3.0, 30.0);
    } while (rig.parallax_range(a0, a0 + sep, 5).first < 3.0);
    wide_min = std::min(wide_min, rig.parallax_range(a0, a0 + sep, 5).first);
    wide += rig.triangulates({a0, a0 + sep}, 5);
  }
  return {four == 0 && narrow == 0 && wide == trials,
          fmt("%d trials: 4 points triangulated %d, 2-degree views (max point parallax %.2f) %d, 5 points at >= 3 "
              "degrees (min %.2f) %d",
              trials, four, narrow_max, narrow, wide_min, wide)};
}

// 8. Query and verification latency against 500 models.
Outcome throughput(bool& warn) {
  Config c;
  c.scene.seed = 808;
  c.scene.num_models = 500;
  c.scene.points_per_model = 200;
  c.scene.num_instances = 6;
  c.scene.num_frames = 10;
  c.scene.landmarks = 10;
  auto w = testing::make_world(c);
  std::vector<double> ms;
  size_t detections = 0;
  for (Frame f : w->scene.frames) {
    const auto t0 = Clock::now();
    quantize_frame(f, *w->vocab);
    detections += recognize_frame(f, {}, *w->db, c.camera, c.recognition).observations.size();
    ms.push_back(1000.0 * seconds_since(t0));
  }
  double mean = 0.0;
  for (double v : ms) mean += v;
  mean /= static_cast<double>(ms.size());
  warn = mean >= 300.0;
  return {true, fmt("500 models, %zu frames, mean %.1f ms, max %.1f ms per frame, %zu detections", ms.size(), mean,
                    *std::max_element(ms.begin(), ms.end()), detections)};
}

// 9. Identical seeds give identical outputs.
Outcome determinism() {
  const SceneRun a = run_scene(short_config());
  const SceneRun b = run_scene(short_config());
  const bool same_map = a.map_text == b.map_text;
  const bool same_report = format_report(a.report) == format_report(b.report);
  return {same_map && same_report && !a.map_text.empty(),
          fmt("map dumps %s (%zu bytes), eval reports %s", same_map ? "identical" : "differ", a.map_text.size(),
              same_report ? "identical" : "differ")};
}

}  // namespace
}  // namespace objslam

int main() {
  using namespace objslam;
  int failures = 0;
  auto report = [&](int n, const std::function<Outcome()>& f) {
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::printf("%s criterion %d: %s\n", o.pass ? "PASS" : "FAIL", n, o.detail.c_str());
    std::fflush(stdout);
    failures += !o.pass;
  };
  report(1, kl_identity);
  report(2, retrieval);
  report(3, disac_vs_ordered);
  report(4, ba_correctness);
  report(5, scale_recovery);
  report(6, gatekeeping);
  report(7, triangulation_gates);
  bool slow = false;
  report(8, [&] {
    Outcome o = throughput(slow);
    if (slow) o.detail += " (WARN: above the 300 ms target)";
    return o;
  });
  report(9, determinism);
  std::printf("%d hard criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
