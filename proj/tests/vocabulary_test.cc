#include <algorithm>
#include <limits>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>

#include "objslam/errors.h"
#include "objslam/random.h"
#include "objslam/vocabulary.h"
#include "test_support.h"

namespace objslam {
namespace {

TEST(Hamming, Basics) {
  Random rng(1);
  const BinaryDescriptor a = random_descriptor(rng);
  EXPECT_EQ(hamming(a, a), 0);
  EXPECT_EQ(hamming(a, a.complement()), 256);
  for (int t = 0; t < 50; ++t) {
    const BinaryDescriptor x = random_descriptor(rng);
    const BinaryDescriptor y = random_descriptor(rng);
    int loop = 0;
    for (int i = 0; i < BinaryDescriptor::kBits; ++i) loop += x.bit(i) != y.bit(i);
    EXPECT_EQ(hamming(x, y), loop);
  }
}

TEST(Descriptor, HexRoundTripAndFlips) {
  Random rng(2);
  const BinaryDescriptor a = random_descriptor(rng);
  const std::string hex = to_hex(a);
  EXPECT_EQ(hex.size(), 64u);
  EXPECT_EQ(descriptor_from_hex(hex), a);
  EXPECT_EQ(hamming(a, flip_random_bits(a, 7, rng)), 7);
  BinaryDescriptor b;
  b.set_byte(0, 0xa5);
  EXPECT_EQ(to_hex(b).substr(0, 2), "a5");
}

TrainingSet separable_training() {
  Random rng(3);
  const BinaryDescriptor d = random_descriptor(rng);
  TrainingSet t;
  for (int img = 0; img < 4; ++img) t.images.push_back({d, d.complement(), d, d.complement()});
  return t;
}

TEST(Vocabulary, SeparableTwoWords) {
  const TrainingSet t = separable_training();
  const VocabularyTree tree = build_vocabulary(t, 2, 1, 0);
  ASSERT_EQ(tree.word_count(), 2u);
  const BinaryDescriptor d = t.images[0][0];
  std::vector<BinaryDescriptor> centers{tree.word_center(0), tree.word_center(1)};
  EXPECT_TRUE(std::count(centers.begin(), centers.end(), d) == 1);
  EXPECT_TRUE(std::count(centers.begin(), centers.end(), d.complement()) == 1);
}

TEST(Vocabulary, TieGoesToLowerChild) {
  const TrainingSet t = separable_training();
  const VocabularyTree tree = build_vocabulary(t, 2, 1, 0);
  const auto& root = tree.node(0);
  const BinaryDescriptor c0 = tree.node(root.first_child).center;
  // Half the bits of c0 flipped: 128 from each child.
  BinaryDescriptor q = c0;
  for (int i = 0; i < 128; ++i) q.flip_bit(i);
  ASSERT_EQ(hamming(q, c0), hamming(q, tree.node(root.first_child + 1).center));
  EXPECT_EQ(tree.word_of(q), static_cast<uint32_t>(tree.node(root.first_child).word_id));
}

TEST(Vocabulary, PreconditionsThrow) {
  TrainingSet t;
  t.images.push_back({BinaryDescriptor{}});
  EXPECT_THROW(build_vocabulary(t, 2, 1, 0), InvalidArgument);
  EXPECT_THROW(build_vocabulary(separable_training(), 1, 1, 0), InvalidArgument);
  EXPECT_THROW(build_vocabulary(separable_training(), 2, 0, 0), InvalidArgument);
}

TEST(Vocabulary, WordCountBoundOnLargeRandomCorpus) {
  Random rng(4);
  TrainingSet t;
  for (int img = 0; img < 70; ++img) {
    t.images.emplace_back();
    for (int i = 0; i < 500; ++i) t.images.back().push_back(random_descriptor(rng));
  }
  const VocabularyTree tree = build_vocabulary(t, 32, 3, 0);
  EXPECT_GT(tree.word_count(), 0u);
  EXPECT_LE(tree.word_count(), 32768u);
}

class SceneVocabulary : public ::testing::Test {
 protected:
  const testing::World& world = testing::small_world();
  const VocabularyTree& tree = *world.vocab;
};

TEST_F(SceneVocabulary, DeterministicPerSeed) {
  const VocabularyTree again = build_vocabulary(world.scene.corpus, 32, 3, 0);
  EXPECT_EQ(again.serialize(), tree.serialize());
  EXPECT_EQ(again.hash(), tree.hash());
}

TEST_F(SceneVocabulary, SerializationRoundTrip) {
  const auto bytes = tree.serialize();
  const VocabularyTree back = VocabularyTree::deserialize(bytes);
  EXPECT_EQ(back.serialize(), bytes);
  auto broken = bytes;
  broken[0] ^= 0xff;
  EXPECT_THROW(VocabularyTree::deserialize(broken), FormatError);
  broken = bytes;
  broken.pop_back();
  EXPECT_THROW(VocabularyTree::deserialize(broken), FormatError);
}

TEST_F(SceneVocabulary, LeafCentersQuantizeToTheirWord) {
  for (uint32_t w = 0; w < tree.word_count(); ++w) EXPECT_EQ(tree.word_of(tree.word_center(w)), w);
}

uint32_t descend(const VocabularyTree& tree, const BinaryDescriptor& d, int* depth) {
  uint32_t id = 0;
  *depth = 0;
  while (tree.node(id).n_children > 0) {
    const auto& n = tree.node(id);
    uint32_t best = n.first_child;
    for (uint32_t c = n.first_child + 1; c < n.first_child + n.n_children; ++c) {
      if (hamming(d, tree.node(c).center) < hamming(d, tree.node(best).center)) best = c;
    }
    id = best;
    ++*depth;
  }
  return static_cast<uint32_t>(tree.node(id).word_id);
}

TEST_F(SceneVocabulary, QuantizeMatchesExplicitDescent) {
  Random rng(5);
  for (int i = 0; i < 500; ++i) {
    const BinaryDescriptor d = random_descriptor(rng);
    int depth = 0;
    const NodePath p = tree.quantize(d);
    EXPECT_EQ(p.word, descend(tree, d, &depth));
    EXPECT_EQ(static_cast<int>(p.nodes.size()), depth);
    EXPECT_EQ(tree.path_of_word(p.word).nodes, p.nodes);
  }
}

TEST_F(SceneVocabulary, TrainingDescriptorsReachBoundedDepth) {
  double leaf = 0.0, root = 0.0;
  size_t n = 0;
  const BinaryDescriptor root_center = tree.node(0).center;
  for (const auto& img : world.scene.corpus.images) {
    for (const auto& d : img) {
      const NodePath p = tree.quantize(d);
      EXPECT_LE(static_cast<int>(p.nodes.size()), tree.depth());
      leaf += hamming(d, tree.word_center(p.word));
      root += hamming(d, root_center);
      ++n;
    }
  }
  EXPECT_LE(leaf / n, root / n);
}

TEST_F(SceneVocabulary, NodeAtLevelClampsToLeaf) {
  const NodePath p = tree.quantize(world.scene.corpus.images[0][0]);
  EXPECT_EQ(p.node_at_level(1), p.nodes.front());
  EXPECT_EQ(p.node_at_level(99), p.nodes.back());
}

TEST_F(SceneVocabulary, BowSingleWordAndEmpty) {
  EXPECT_TRUE(tree.to_bow(std::vector<BinaryDescriptor>{}).empty());
  uint32_t w = 0;
  while (!(tree.idf(w) > 0.0)) ++w;
  const std::vector<BinaryDescriptor> ds(3, tree.word_center(w));
  const BowVector bow = tree.to_bow(ds);
  ASSERT_EQ(bow.size(), 1u);
  EXPECT_EQ(bow.begin()->first, w);
  EXPECT_DOUBLE_EQ(bow.begin()->second, 1.0);
}

TEST_F(SceneVocabulary, BowMatchesHandTfIdf) {
  std::vector<BinaryDescriptor> ds;
  std::vector<uint32_t> words;
  for (uint32_t w = 0; words.size() < 4 && w < tree.word_count(); ++w) {
    if (tree.idf(w) > 0.0) words.push_back(w);
  }
  ASSERT_EQ(words.size(), 4u);
  // counts 1, 2, 3, 4
  for (size_t i = 0; i < words.size(); ++i) {
    for (size_t c = 0; c <= i; ++c) ds.push_back(tree.word_center(words[i]));
  }
  double total = 0.0;
  for (size_t i = 0; i < words.size(); ++i) total += (i + 1) * tree.idf(words[i]);
  BowVector bow = tree.to_bow(ds);
  ASSERT_EQ(bow.size(), 4u);
  for (size_t i = 0; i < words.size(); ++i) {
    EXPECT_NEAR(bow.at(words[i]), (i + 1) * tree.idf(words[i]) / total, 1e-12);
  }
  std::reverse(ds.begin(), ds.end());
  EXPECT_EQ(tree.to_bow(ds), bow);
}

TEST(Majority, TiesResolveToZero) {
  BinaryDescriptor a, b;
  a.set_bit(0, true);
  b.set_bit(1, true);
  const std::vector<BinaryDescriptor> ds{a, b};
  EXPECT_EQ(majority_descriptor(ds), BinaryDescriptor{});
  const std::vector<BinaryDescriptor> three{a, a, b};
  EXPECT_EQ(majority_descriptor(three), a);
}

TEST(Corpus, FileRoundTrip) {
  const std::string dir = testing::temp_dir("corpus");
  const TrainingSet t = separable_training();
  write_training_set(dir + "/c.txt", t);
  const TrainingSet back = read_training_set(dir + "/c.txt");
  ASSERT_EQ(back.images.size(), t.images.size());
  EXPECT_EQ(back.images[1], t.images[1]);
  EXPECT_EQ(back.descriptor_count(), 16u);
}

}  // namespace
}  // namespace objslam
