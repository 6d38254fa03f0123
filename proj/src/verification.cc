#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "objslam/errors.h"
#include "objslam/recognition.h"

namespace objslam {
namespace {

struct Evaluation {
  double score = 0.0;
  std::vector<size_t> inliers;
};

Evaluation evaluate(const Pose& pose, std::span<const Correspondence2D3D> corrs,
                    const CameraIntrinsics& k, double mu_e) {
  Evaluation ev;
  for (size_t i = 0; i < corrs.size(); ++i) {
    const auto px = try_project(k, pose * corrs[i].point);
    if (!px) continue;
    const double err = (px->vec() - corrs[i].pixel.vec()).norm();
    if (err < mu_e) {
      ev.score += mu_e - err;
      ev.inliers.push_back(i);
    }
  }
  return ev;
}

std::optional<Pose> try_solve(std::span<const Correspondence2D3D> corrs, const CameraIntrinsics& k) {
  try {
    Pose pose = solve_pnp(corrs, k);
    if (!pose.rotation.allFinite() || !pose.translation.allFinite()) return std::nullopt;
    return pose;
  } catch (const Error&) {
    return std::nullopt;
  }
}

// Re-solve on the inlier set; kept only when the score does not drop.
void final_refit(PoseHypothesis& best, std::span<const Correspondence2D3D> corrs,
                 const CameraIntrinsics& k, double mu_e) {
  std::vector<Correspondence2D3D> in;
  for (size_t i : best.inliers) in.push_back(corrs[i]);
  try {
    const Pose pose = refine_pnp(in, k, best.pose);
    Evaluation ev = evaluate(pose, corrs, k, mu_e);
    if (ev.score >= best.score && ev.inliers.size() >= 4) {
      best.pose = pose;
      best.score = ev.score;
      best.inliers = std::move(ev.inliers);
    }
  } catch (const Error&) {
  }
}

// Iterations after which a sample of 4 inliers has been drawn with the given confidence.
double needed_iterations(size_t inliers, size_t n, double confidence) {
  const double w = static_cast<double>(inliers) / static_cast<double>(n);
  const double p_good = std::pow(w, 4);
  if (p_good >= 1.0) return 0.0;
  if (p_good <= 0.0) return std::numeric_limits<double>::infinity();
  return std::log(1.0 - confidence) / std::log(1.0 - p_good);
}

std::vector<Correspondence2D3D> to_corrs(std::span<const ObservationMatch> matches,
                                         const ObjectModel& model) {
  std::vector<Correspondence2D3D> out;
  out.reserve(matches.size());
  for (const auto& m : matches) out.push_back({m.pixel, model.points[m.point]});
  return out;
}

}  // namespace

double s_disac(const Pose& object_in_camera, std::span<const Correspondence2D3D> corrs,
               const CameraIntrinsics& k, double mu_e) {
  return evaluate(object_in_camera, corrs, k, mu_e).score;
}

bool accept_detection(double score, size_t n_inliers, const RecognitionParams& params) {
  return n_inliers >= static_cast<size_t>(std::max(params.min_inliers, 4)) &&
         score >= params.min_score_factor * params.mu_e;
}

std::vector<double> disac_probabilities(std::span<const int> distances) {
  std::vector<double> p(distances.size());
  double total = 0.0;
  for (size_t i = 0; i < distances.size(); ++i) {
    p[i] = 1.0 / std::max(distances[i], 1);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

std::array<size_t, 4> disac_sample(std::span<const int> distances, Random& rng) {
  if (distances.size() < 4) throw InvalidArgument("DISAC needs at least 4 correspondences");
  std::vector<double> weight(distances.size());
  double total = 0.0;
  for (size_t i = 0; i < distances.size(); ++i) {
    weight[i] = 1.0 / std::max(distances[i], 1);
    total += weight[i];
  }
  std::array<size_t, 4> out{};
  for (int draw = 0; draw < 4; ++draw) {
    const double target = rng.uniform() * total;
    double acc = 0.0;
    size_t pick = distances.size();
    size_t last_live = 0;
    for (size_t i = 0; i < weight.size(); ++i) {
      if (weight[i] <= 0.0) continue;
      last_live = i;
      acc += weight[i];
      if (acc > target) {
        pick = i;
        break;
      }
    }
    if (pick == distances.size()) pick = last_live;  // round-off at the tail
    out[draw] = pick;
    total -= weight[pick];
    weight[pick] = 0.0;
  }
  return out;
}

std::optional<PoseHypothesis> disac_verify(std::span<const Correspondence2D3D> corrs,
                                           std::span<const int> distances,
                                           const CameraIntrinsics& k, Random& rng,
                                           int max_iterations, double mu_e, double confidence) {
  if (corrs.size() < 4 || distances.size() != corrs.size()) return std::nullopt;
  std::optional<PoseHypothesis> best;
  double stop_after = std::numeric_limits<double>::infinity();
  int iter = 0;
  for (; iter < max_iterations && iter < stop_after; ++iter) {
    const auto idx = disac_sample(distances, rng);
    const std::array<Correspondence2D3D, 4> sample = {corrs[idx[0]], corrs[idx[1]], corrs[idx[2]],
                                                      corrs[idx[3]]};
    const auto pose = try_solve(sample, k);
    if (!pose) continue;
    Evaluation ev = evaluate(*pose, corrs, k, mu_e);
    if (!best || ev.score > best->score) {
      best = PoseHypothesis{*pose, std::move(ev.inliers), ev.score, 0};
      stop_after = needed_iterations(best->inliers.size(), corrs.size(), confidence);
    }
  }
  if (!best || best->inliers.size() < 4) return std::nullopt;
  best->iterations = iter;
  final_refit(*best, corrs, k, mu_e);
  return best;
}

std::optional<PoseHypothesis> ordered_subset_verify(std::span<const Correspondence2D3D> corrs,
                                                    std::span<const int> distances,
                                                    const CameraIntrinsics& k, int max_iterations,
                                                    double mu_e) {
  const size_t n = corrs.size();
  if (n < 4 || distances.size() != n) return std::nullopt;
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return distances[a] < distances[b]; });
  std::optional<PoseHypothesis> best;
  int iter = 0;
  // Colexicographic enumeration: the largest index grows slowest.
  for (size_t d = 3; d < n && iter < max_iterations; ++d) {
    for (size_t c = 2; c < d && iter < max_iterations; ++c) {
      for (size_t b = 1; b < c && iter < max_iterations; ++b) {
        for (size_t a = 0; a < b && iter < max_iterations; ++a, ++iter) {
          const std::array<Correspondence2D3D, 4> sample = {corrs[order[a]], corrs[order[b]],
                                                            corrs[order[c]], corrs[order[d]]};
          const auto pose = try_solve(sample, k);
          if (!pose) continue;
          Evaluation ev = evaluate(*pose, corrs, k, mu_e);
          if (!best || ev.score > best->score) best = PoseHypothesis{*pose, std::move(ev.inliers), ev.score, 0};
        }
      }
    }
  }
  if (!best || best->inliers.size() < 4) return std::nullopt;
  best->iterations = iter;
  final_refit(*best, corrs, k, mu_e);
  return best;
}

std::vector<ObservationMatch> guided_matches(const Pose& object_in_camera, const ObjectModel& model,
                                             const Frame& frame, const std::vector<bool>& available,
                                             const CameraIntrinsics& k, double radius_px,
                                             int max_hamming) {
  // Bucket available features on a coarse grid.
  const double cell = std::max(radius_px, 8.0);
  const int cols = static_cast<int>(std::ceil(k.width / cell)) + 1;
  const int rows = static_cast<int>(std::ceil(k.height / cell)) + 1;
  std::vector<std::vector<uint32_t>> grid(static_cast<size_t>(cols * rows));
  auto cell_of = [&](double u, double v) {
    const int cx = std::clamp(static_cast<int>(std::floor(u / cell)), 0, cols - 1);
    const int cy = std::clamp(static_cast<int>(std::floor(v / cell)), 0, rows - 1);
    return std::pair{cx, cy};
  };
  for (uint32_t f = 0; f < frame.features.size(); ++f) {
    if (!available[f]) continue;
    const auto [cx, cy] = cell_of(frame.features[f].pixel.u, frame.features[f].pixel.v);
    grid[static_cast<size_t>(cy * cols + cx)].push_back(f);
  }

  struct Proposal {
    int distance;
    double pixel_error;
    uint32_t point;
    uint32_t feature;
  };
  std::vector<Proposal> proposals;
  for (uint32_t p = 0; p < model.points.size(); ++p) {
    const auto px = try_project(k, object_in_camera * model.points[p]);
    if (!px || !k.in_image(*px)) continue;
    const auto [x0, y0] = cell_of(px->u - radius_px, px->v - radius_px);
    const auto [x1, y1] = cell_of(px->u + radius_px, px->v + radius_px);
    std::optional<Proposal> best;
    for (int cy = y0; cy <= y1; ++cy) {
      for (int cx = x0; cx <= x1; ++cx) {
        for (uint32_t f : grid[static_cast<size_t>(cy * cols + cx)]) {
          const auto& feat = frame.features[f];
          const double du = feat.pixel.u - px->u, dv = feat.pixel.v - px->v;
          if (std::abs(du) > radius_px || std::abs(dv) > radius_px) continue;
          int dist = std::numeric_limits<int>::max();
          for (const auto& d : model.descriptors[p]) dist = std::min(dist, hamming(feat.descriptor, d.descriptor));
          if (dist >= max_hamming) continue;
          const Proposal cand{dist, std::hypot(du, dv), p, f};
          if (!best || cand.distance < best->distance ||
              (cand.distance == best->distance &&
               (cand.pixel_error < best->pixel_error ||
                (cand.pixel_error == best->pixel_error && cand.feature < best->feature)))) {
            best = cand;
          }
        }
      }
    }
    if (best) proposals.push_back(*best);
  }
  // One model point per feature: the closest descriptor wins.
  std::sort(proposals.begin(), proposals.end(), [](const Proposal& a, const Proposal& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    if (a.pixel_error != b.pixel_error) return a.pixel_error < b.pixel_error;
    return a.point < b.point;
  });
  std::vector<bool> taken(frame.features.size(), false);
  std::vector<ObservationMatch> out;
  for (const auto& pr : proposals) {
    if (taken[pr.feature]) continue;
    taken[pr.feature] = true;
    const auto& feat = frame.features[pr.feature];
    out.push_back({pr.point, pr.feature, feat.pixel, feat.level, pr.distance});
  }
  std::sort(out.begin(), out.end(),
            [](const ObservationMatch& a, const ObservationMatch& b) { return a.point < b.point; });
  return out;
}

RefineResult refine_pose(const Pose& initial, std::span<const ObservationMatch> initial_matches,
                         const ObjectModel& model, const Frame& frame,
                         const std::vector<bool>& available, const CameraIntrinsics& k,
                         const RecognitionParams& params) {
  auto keep_inliers = [&](const Pose& pose, std::span<const ObservationMatch> matches) {
    const auto corrs = to_corrs(matches, model);
    const Evaluation ev = evaluate(pose, corrs, k, params.mu_e);
    RefineResult r{pose, {}, ev.score};
    for (size_t i : ev.inliers) r.matches.push_back(matches[i]);
    return r;
  };
  RefineResult original = keep_inliers(initial, initial_matches);

  const auto matches =
      guided_matches(initial, model, frame, available, k, params.refine_radius_px, params.max_hamming);
  if (matches.size() < 4) return original;
  try {
    auto corrs = to_corrs(matches, model);
    Pose pose = refine_pnp(corrs, k, initial);
    // Second pass on the inliers of the first keeps stray window matches out.
    RefineResult first = keep_inliers(pose, matches);
    if (first.matches.size() >= 4) {
      pose = refine_pnp(to_corrs(first.matches, model), k, pose);
    }
    RefineResult refined = keep_inliers(pose, matches);
    if (refined.score >= original.score && refined.matches.size() >= 4) return refined;
  } catch (const Error&) {
  }
  return original;
}

}  // namespace objslam
