#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "objslam/database.h"
#include "objslam/errors.h"
#include "objslam/recognition.h"
#include "objslam/random.h"
#include "test_support.h"

namespace objslam {
namespace {

BowVector random_bow(Random& rng, int support, uint32_t vocab_size) {
  BowVector v;
  while (static_cast<int>(v.size()) < support) v[static_cast<uint32_t>(rng.uniform_index(vocab_size))] = rng.uniform(0.01, 1.0);
  double total = 0.0;
  for (const auto& [w, x] : v) total += x;
  for (auto& [w, x] : v) x /= total;
  return v;
}

TEST(KlScore, DisjointSupportsScoreZero) {
  const BowVector v{{1, 0.5}, {2, 0.5}};
  const BowVector w{{3, 1.0}};
  EXPECT_EQ(kl_score(v, w, 1e-6), 0.0);
}

TEST(KlScore, WorkedExample) {
  const BowVector v{{0, 0.5}, {1, 0.5}};
  const BowVector w{{0, 0.25}, {1, 0.25}, {2, 0.5}};
  EXPECT_NEAR(kl_score(v, w, 1e-6), -12.4292161968, 1e-9);
  EXPECT_NEAR(kl_score(v, w, 1e-6), std::log(1e-6) - std::log(0.25), 1e-12);
}

// s_kl plus the v-only term is the dense KL with epsilon in w's zeros.
TEST(KlScore, IdentityWithDenseKl) {
  Random rng(1);
  const double eps = 1e-6;
  for (int t = 0; t < 200; ++t) {
    const BowVector v = random_bow(rng, 1 + static_cast<int>(rng.uniform_index(30)), 60);
    const BowVector w = random_bow(rng, 1 + static_cast<int>(rng.uniform_index(30)), 60);
    double v_term = 0.0;
    for (const auto& [i, vi] : v) v_term += vi * std::log(vi / eps);
    EXPECT_NEAR(kl_score(v, w, eps) + v_term, kl_divergence_full(v, w, eps), 1e-9);
  }
}

TEST(AltScore, L1Extremes) {
  const BowVector v{{1, 0.25}, {4, 0.75}};
  EXPECT_EQ(alt_score(v, v, Metric::kL1), 0.0);
  const BowVector w{{2, 1.0}};
  EXPECT_NEAR(alt_score(v, w, Metric::kL1), 2.0, 1e-12);
  EXPECT_THROW(alt_score(v, w, "cosine"), InvalidArgument);
}

TEST(AltScore, MatchesDenseOracle) {
  Random rng(2);
  for (int t = 0; t < 50; ++t) {
    const BowVector v = random_bow(rng, 10, 40);
    const BowVector w = random_bow(rng, 10, 40);
    std::vector<double> a(40, 0.0), b(40, 0.0);
    for (const auto& [i, x] : v) a[i] = x;
    for (const auto& [i, x] : w) b[i] = x;
    double l1 = 0, l2 = 0, chi2 = 0, bc = 0;
    for (int i = 0; i < 40; ++i) {
      l1 += std::abs(a[i] - b[i]);
      l2 += (a[i] - b[i]) * (a[i] - b[i]);
      if (a[i] + b[i] > 0) chi2 += (a[i] - b[i]) * (a[i] - b[i]) / (a[i] + b[i]);
      bc += std::sqrt(a[i] * b[i]);
    }
    EXPECT_NEAR(alt_score(v, w, Metric::kL1), l1, 1e-12);
    EXPECT_NEAR(alt_score(v, w, Metric::kL2), std::sqrt(l2), 1e-12);
    EXPECT_NEAR(alt_score(v, w, Metric::kChi2), chi2, 1e-12);
    EXPECT_NEAR(alt_score(v, w, "bhattacharyya"), 1.0 - bc, 1e-12);
  }
}

TEST(Metric, NamesRoundTrip) {
  for (Metric m : {Metric::kKl, Metric::kBhattacharyya, Metric::kChi2, Metric::kL1, Metric::kL2}) {
    EXPECT_EQ(parse_metric(metric_name(m)), m);
  }
  EXPECT_THROW(parse_metric("hamming"), InvalidArgument);
}

class SceneDatabase : public ::testing::Test {
 protected:
  const testing::World& world = testing::small_world();
  const ObjectDatabase& db = *world.db;
};

TEST_F(SceneDatabase, SelfRetrieval) {
  for (uint32_t id : db.model_ids()) {
    const auto c = db.query(db.model(id).bow, 10);
    ASSERT_FALSE(c.empty());
    EXPECT_EQ(c.front().model_id, id);
    EXPECT_LE(c.size(), 10u);
  }
  EXPECT_EQ(RecognitionParams{}.top_n, 10);
}

TEST_F(SceneDatabase, ModelInvariants) {
  for (uint32_t id : db.model_ids()) {
    const ObjectModel& m = db.model(id);
    double total = 0.0;
    for (const auto& [w, x] : m.bow) total += x;
    EXPECT_NEAR(total, 1.0, 1e-12);
    for (const auto& descs : m.descriptors) {
      ASSERT_FALSE(descs.empty());
      std::set<uint32_t> words;
      for (const auto& d : descs) words.insert(d.path.word);
      EXPECT_EQ(words.size(), descs.size());
    }
  }
}

TEST_F(SceneDatabase, InvertedIndexMatchesModelVectors) {
  size_t entries = 0;
  for (uint32_t w = 0; w < world.vocab->word_count(); ++w) {
    for (const auto& e : db.inverted(w)) {
      EXPECT_EQ(db.model(e.model_id).bow.at(w), e.weight);
      ++entries;
    }
  }
  size_t expected = 0;
  for (uint32_t id : db.model_ids()) expected += db.model(id).bow.size();
  EXPECT_EQ(entries, expected);
}

TEST_F(SceneDatabase, SerializationRoundTripPreservesQueries) {
  const auto bytes = db.serialize();
  const ObjectDatabase back = ObjectDatabase::deserialize(bytes, *world.vocab);
  EXPECT_EQ(back.serialize(), bytes);
  Random rng(3);
  for (int t = 0; t < 20; ++t) {
    const BowVector v = random_bow(rng, 40, static_cast<uint32_t>(world.vocab->word_count()));
    const auto a = db.query(v, 10);
    const auto b = back.query(v, 10);
    ASSERT_EQ(a.size(), b.size());
    for (size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].model_id, b[i].model_id);
      EXPECT_EQ(a[i].score, b[i].score);
    }
  }
  const VocabularyTree other = build_vocabulary(world.scene.corpus, 8, 2, 1);
  EXPECT_THROW(ObjectDatabase::deserialize(bytes, other), FormatError);
}

TEST_F(SceneDatabase, InsertionOrderDoesNotMatter) {
  ObjectDatabase reversed(*world.vocab);
  auto ids = db.model_ids();
  std::reverse(ids.begin(), ids.end());
  for (uint32_t id : ids) reversed.add_model(db.model(id));
  EXPECT_EQ(reversed.serialize(), db.serialize());
  EXPECT_THROW(reversed.add_model(db.model(ids[0])), InvalidArgument);
}

TEST_F(SceneDatabase, AltMetricQueriesAgreeWithPairwiseScores) {
  Random rng(4);
  const BowVector v = db.model(2).bow;
  for (Metric m : {Metric::kL1, Metric::kL2, Metric::kChi2, Metric::kBhattacharyya}) {
    for (const auto& c : db.query(v, 10, m)) EXPECT_NEAR(c.score, alt_score(v, db.model(c.model_id).bow, m), 1e-9);
  }
  for (const auto& c : db.query(v, 10)) EXPECT_NEAR(c.score, kl_score(v, db.model(c.model_id).bow, db.epsilon()), 1e-9);
}

TEST(Database, EmptyAndSingle) {
  const testing::World& world = testing::small_world();
  ObjectDatabase db(*world.vocab);
  EXPECT_THROW(db.query(BowVector{{0, 1.0}}, 10), InvalidArgument);
  db.add_model(world.db->model(3));
  const auto c = db.query(world.db->model(3).bow, 10);
  ASSERT_EQ(c.size(), 1u);
  EXPECT_EQ(c[0].model_id, 3u);
  EXPECT_THROW(db.query(world.db->model(3).bow, 0), InvalidArgument);
  EXPECT_THROW(db.model(99), InvalidArgument);
}

std::vector<DirectMatch> all_pairs_oracle(const ObjectModel& m, std::span<const QueryFeature> q, int level,
                                          int max_distance) {
  // Per node: every feature against every point with a descriptor in that node.
  std::map<uint32_t, std::vector<uint32_t>> feats_by_node;
  for (uint32_t f = 0; f < q.size(); ++f) feats_by_node[q[f].path.node_at_level(level)].push_back(f);
  std::vector<DirectMatch> raw;
  for (const auto& [node, feats] : feats_by_node) {
    std::map<uint32_t, std::vector<int>> dist;  // point -> per-feature distance
    for (uint32_t p = 0; p < m.descriptors.size(); ++p) {
      for (const auto& d : m.descriptors[p]) {
        if (d.path.node_at_level(level) != node) continue;
        auto& row = dist.try_emplace(p, std::vector<int>(feats.size(), std::numeric_limits<int>::max())).first->second;
        for (size_t i = 0; i < feats.size(); ++i) row[i] = std::min(row[i], hamming(q[feats[i]].descriptor, d.descriptor));
      }
    }
    if (dist.empty()) continue;
    for (size_t i = 0; i < feats.size(); ++i) {
      uint32_t bp = dist.begin()->first;
      for (const auto& [p, row] : dist) {
        if (row[i] < dist[bp][i]) bp = p;
      }
      const auto& row = dist[bp];
      size_t bf = 0;
      for (size_t j = 1; j < feats.size(); ++j) {
        if (row[j] < row[bf]) bf = j;
      }
      if (bf == i && row[i] < max_distance) raw.push_back({feats[i], q[feats[i]].pixel, bp, row[i]});
    }
  }
  std::map<uint32_t, DirectMatch> best;
  for (const auto& r : raw) {
    auto it = best.find(r.point);
    if (it == best.end() || r.distance < it->second.distance ||
        (r.distance == it->second.distance && r.feature < it->second.feature)) {
      best[r.point] = r;
    }
  }
  std::vector<DirectMatch> out;
  for (const auto& [p, r] : best) out.push_back(r);
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.feature < b.feature; });
  return out;
}

TEST_F(SceneDatabase, DirectIndexMatchesAllPairsOracle) {
  Random rng(5);
  const ObjectModel& m = db.model(1);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<QueryFeature> q;
    for (int i = 0; i < 30; ++i) {
      const auto p = rng.uniform_index(m.points.size());
      const auto& d = m.descriptors[p][rng.uniform_index(m.descriptors[p].size())].descriptor;
      q.push_back({PixelPoint{double(i), 0.0}, flip_random_bits(d, 5, rng), {}});
    }
    for (int i = 0; i < 30; ++i) q.push_back({PixelPoint{double(i), 1.0}, random_descriptor(rng), {}});
    for (auto& f : q) f.path = world.vocab->quantize(f.descriptor);
    const auto got = db.direct_index_correspondences(q, 1);
    const auto want = all_pairs_oracle(m, q, db.direct_level(), 50);
    ASSERT_EQ(got.size(), want.size());
    std::set<uint32_t> feats, points;
    for (size_t i = 0; i < got.size(); ++i) {
      EXPECT_EQ(got[i].feature, want[i].feature);
      EXPECT_EQ(got[i].point, want[i].point);
      EXPECT_EQ(got[i].distance, want[i].distance);
      EXPECT_LT(got[i].distance, 50);
      feats.insert(got[i].feature);
      points.insert(got[i].point);
    }
    EXPECT_EQ(feats.size(), got.size());
    EXPECT_EQ(points.size(), got.size());
  }
}

TEST_F(SceneDatabase, DirectIndexExactAndFiltered) {
  const ObjectModel& m = db.model(0);
  const ModelDescriptor& md = m.descriptors[7][0];
  std::vector<QueryFeature> q{{PixelPoint{1, 2}, md.descriptor, md.path}};
  auto got = db.direct_index_correspondences(q, 0);
  ASSERT_EQ(got.size(), 1u);
  EXPECT_EQ(got[0].distance, 0);

  // Pretend the feature lives in a level-1 node the model never uses.
  std::set<uint32_t> used;
  for (const auto& [node, refs] : db.direct(0)) used.insert(node);
  const auto& root = world.vocab->node(0);
  uint32_t unused = root.first_child;
  while (used.count(unused)) ++unused;
  ASSERT_LT(unused, root.first_child + root.n_children);
  q[0].path.nodes[0] = unused;
  EXPECT_TRUE(db.direct_index_correspondences(q, 0).empty());
}

TEST(Database, RawModelFileRoundTrip) {
  const testing::World& world = testing::small_world();
  const RawModel& raw = world.scene.models[0];
  const RawModel back = parse_raw_model(format_raw_model(raw));
  EXPECT_EQ(back.id, raw.id);
  ASSERT_EQ(back.points.size(), raw.points.size());
  EXPECT_LT((back.points[5].position - raw.points[5].position).norm(), 1e-9);  // nine decimals on disk
  EXPECT_EQ(back.points[5].descriptors, raw.points[5].descriptors);
  EXPECT_THROW(parse_raw_model("model 1 2\n0 0 0 1\n"), FormatError);
  RawModel empty;
  EXPECT_THROW(build_model(empty, *world.vocab), InvalidArgument);
}

}  // namespace
}  // namespace objslam
