#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "objslam/descriptor.h"
#include "objslam/geometry.h"
#include "objslam/vocabulary.h"

namespace objslam {

// Model as read from disk: object-frame points (meters) with raw descriptor sets.
struct RawModelPoint {
  Vec3 position = Vec3::Zero();
  std::vector<BinaryDescriptor> descriptors;
};

struct RawModel {
  uint32_t id = 0;
  std::vector<RawModelPoint> points;
};

// "model <id> <n_points>", then per point "x y z n_desc" and n_desc hex lines.
RawModel read_raw_model(const std::string& path);
RawModel parse_raw_model(const std::string& text);
void write_raw_model(const std::string& path, const RawModel& model);
std::string format_raw_model(const RawModel& model);

struct ModelDescriptor {
  BinaryDescriptor descriptor;
  NodePath path;
};

// Indexed model. Descriptors of one point that quantize to the same word are
// collapsed into their per-bit majority.
struct ObjectModel {
  uint32_t id = 0;
  std::vector<Vec3> points;
  std::vector<std::vector<ModelDescriptor>> descriptors;  // per point
  BowVector bow;
  Vec3 centroid = Vec3::Zero();
  double radius = 0.0;  // bounding sphere about the centroid
};

ObjectModel build_model(const RawModel& raw, const VocabularyTree& vocab);

// Only words present in both vectors contribute. Lower is more similar.
double kl_score(const BowVector& v, const BowVector& w, double epsilon);

// Dense reference: KL(v || w) with w's zeros replaced by epsilon.
double kl_divergence_full(const BowVector& v, const BowVector& w, double epsilon);

enum class Metric { kKl, kBhattacharyya, kChi2, kL1, kL2 };

Metric parse_metric(std::string_view name);
std::string metric_name(Metric metric);

// Bhattacharyya is reported as 1 - BC so that lower is always better.
double alt_score(const BowVector& v, const BowVector& w, Metric metric);
double alt_score(const BowVector& v, const BowVector& w, std::string_view metric);

struct Candidate {
  uint32_t model_id = 0;
  double score = 0.0;
  int region_id = -1;
};

struct QueryFeature {
  PixelPoint pixel;
  BinaryDescriptor descriptor;
  NodePath path;
};

struct DirectMatch {
  uint32_t feature = 0;  // index into the query feature list
  PixelPoint pixel;
  uint32_t point = 0;  // model point index
  int distance = 0;
};

struct InvertedEntry {
  uint32_t model_id;
  double weight;
};

struct DescriptorRef {
  uint32_t point;
  uint32_t descriptor;
};

class ObjectDatabase {
 public:
  explicit ObjectDatabase(const VocabularyTree& vocab, int direct_level = 1, double epsilon = 1e-6);

  uint32_t add_model(ObjectModel model);

  size_t size() const { return models_.size(); }
  bool contains(uint32_t id) const { return slot_of_.count(id) != 0; }
  const ObjectModel& model(uint32_t id) const;
  std::vector<uint32_t> model_ids() const;
  const VocabularyTree& vocabulary() const { return *vocab_; }
  int direct_level() const { return direct_level_; }
  double epsilon() const { return epsilon_; }

  // Ascending score, ties by lower id; models sharing no word are omitted.
  std::vector<Candidate> query(const BowVector& v, int top_n, Metric metric = Metric::kKl) const;

  std::vector<DirectMatch> direct_index_correspondences(std::span<const QueryFeature> features,
                                                        uint32_t model_id,
                                                        int max_distance = 50) const;

  const std::vector<InvertedEntry>& inverted(uint32_t word) const { return inverted_.at(word); }
  const std::map<uint32_t, std::vector<DescriptorRef>>& direct(uint32_t model_id) const;

  std::vector<uint8_t> serialize() const;
  static ObjectDatabase deserialize(const std::vector<uint8_t>& bytes, const VocabularyTree& vocab);
  void save(const std::string& path) const;
  static ObjectDatabase load(const std::string& path, const VocabularyTree& vocab);

 private:
  const VocabularyTree* vocab_;
  int direct_level_;
  double epsilon_;
  std::vector<ObjectModel> models_;
  std::map<uint32_t, size_t> slot_of_;
  std::vector<double> self_sq_norm_;  // sum of squared weights per slot
  std::vector<std::vector<InvertedEntry>> inverted_;
  std::vector<std::map<uint32_t, std::vector<DescriptorRef>>> direct_;  // per slot
};

}  // namespace objslam
