#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "objslam/descriptor.h"

namespace objslam {

// Root-to-leaf descent result. nodes[0] is the level-1 node, nodes.back() the leaf.
struct NodePath {
  uint32_t word = 0;
  std::vector<uint32_t> nodes;

  // Node id at `level` (1-based); clamps to the leaf for shallow branches.
  uint32_t node_at_level(int level) const;
};

// Sparse tf-idf vector, word id -> weight, L1-normalised.
using BowVector = std::map<uint32_t, double>;

// Training descriptors grouped by source image (drives the idf weights).
struct TrainingSet {
  std::vector<std::vector<BinaryDescriptor>> images;

  size_t descriptor_count() const;
};

struct VocabularyNode {
  BinaryDescriptor center;
  uint32_t first_child = 0;
  uint32_t n_children = 0;
  int32_t word_id = -1;  // -1 for internal nodes
};

class VocabularyTree {
 public:
  VocabularyTree() = default;

  int branching() const { return k_; }
  int depth() const { return levels_; }
  size_t word_count() const { return word_node_.size(); }
  size_t node_count() const { return nodes_.size(); }
  const VocabularyNode& node(uint32_t id) const { return nodes_.at(id); }
  int node_level(uint32_t id) const { return node_level_.at(id); }
  uint32_t word_node(uint32_t word) const { return word_node_.at(word); }
  const BinaryDescriptor& word_center(uint32_t word) const { return nodes_[word_node_.at(word)].center; }
  double idf(uint32_t word) const { return idf_.at(word); }

  // Greedy nearest-child descent; ties go to the lower child index.
  NodePath quantize(const BinaryDescriptor& d) const;
  uint32_t word_of(const BinaryDescriptor& d) const;
  // Root-to-leaf path of a word, read from the tree structure.
  NodePath path_of_word(uint32_t word) const;

  // tf-idf weighting, zero-idf words dropped, L1 normalised.
  BowVector to_bow(std::span<const BinaryDescriptor> ds) const;
  BowVector to_bow_words(std::span<const uint32_t> words) const;

  std::vector<uint8_t> serialize() const;
  static VocabularyTree deserialize(const std::vector<uint8_t>& bytes);
  void save(const std::string& path) const;
  static VocabularyTree load(const std::string& path);

  // FNV-1a 64 over the serialized bytes.
  uint64_t hash() const;

 private:
  friend VocabularyTree build_vocabulary(const TrainingSet&, int, int, uint64_t);
  void finalize();

  int k_ = 0;
  int levels_ = 0;
  std::vector<VocabularyNode> nodes_;
  std::vector<double> idf_;
  std::vector<uint32_t> word_node_;
  std::vector<int> node_level_;
  std::vector<uint32_t> parent_;
};

// Hierarchical k-majority clustering. Deterministic for a given seed.
VocabularyTree build_vocabulary(const TrainingSet& training, int k, int levels, uint64_t seed);

// Per-bit majority of a descriptor set; ties resolve to 0.
BinaryDescriptor majority_descriptor(std::span<const BinaryDescriptor> ds);

// Corpus file: "image <n>" headers each followed by n hex descriptor lines.
TrainingSet read_training_set(const std::string& path);
void write_training_set(const std::string& path, const TrainingSet& training);

}  // namespace objslam
