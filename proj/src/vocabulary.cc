#include "objslam/vocabulary.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <deque>
#include <fstream>
#include <limits>
#include <sstream>

#include "objslam/binary_io.h"
#include "objslam/errors.h"
#include "objslam/random.h"

namespace objslam {
namespace {

constexpr char kMagic[8] = {'O', 'S', 'L', 'M', 'V', 'O', 'C', 'B'};
constexpr uint32_t kVersion = 1;
constexpr int kMaxClusterIterations = 25;

// k-means++ seeding on Hamming distance. May return fewer than k centers when
// the data has fewer distinct descriptors.
std::vector<BinaryDescriptor> seed_centers(std::span<const BinaryDescriptor> data,
                                           const std::vector<uint32_t>& members, int k,
                                           Random& rng) {
  std::vector<BinaryDescriptor> centers;
  centers.push_back(data[members[rng.uniform_index(members.size())]]);
  std::vector<double> d2(members.size());
  for (size_t i = 0; i < members.size(); ++i) {
    const double d = hamming(data[members[i]], centers[0]);
    d2[i] = d * d;
  }
  while (static_cast<int>(centers.size()) < k) {
    double total = 0.0;
    for (double v : d2) total += v;
    if (total <= 0.0) break;
    const double target = rng.uniform() * total;
    double acc = 0.0;
    size_t pick = members.size() - 1;
    for (size_t i = 0; i < members.size(); ++i) {
      acc += d2[i];
      if (acc > target && d2[i] > 0.0) {
        pick = i;
        break;
      }
    }
    while (d2[pick] <= 0.0) --pick;  // guard against round-off at the tail
    centers.push_back(data[members[pick]]);
    for (size_t i = 0; i < members.size(); ++i) {
      const double d = hamming(data[members[i]], centers.back());
      d2[i] = std::min(d2[i], d * d);
    }
  }
  return centers;
}

int nearest_center(const BinaryDescriptor& d, const std::vector<BinaryDescriptor>& centers) {
  int best = 0;
  int best_dist = std::numeric_limits<int>::max();
  for (size_t c = 0; c < centers.size(); ++c) {
    const int dist = hamming(d, centers[c]);
    if (dist < best_dist) {
      best_dist = dist;
      best = static_cast<int>(c);
    }
  }
  return best;
}

struct Clustering {
  std::vector<BinaryDescriptor> centers;
  std::vector<std::vector<uint32_t>> members;
};

Clustering k_majority(std::span<const BinaryDescriptor> data, const std::vector<uint32_t>& members,
                      int k, Random& rng) {
  std::vector<BinaryDescriptor> centers = seed_centers(data, members, k, rng);
  std::vector<int> assign(members.size(), -1);
  for (int iter = 0; iter < kMaxClusterIterations; ++iter) {
    bool changed = false;
    for (size_t i = 0; i < members.size(); ++i) {
      const int c = nearest_center(data[members[i]], centers);
      if (c != assign[i]) {
        assign[i] = c;
        changed = true;
      }
    }
    if (!changed) break;
    std::vector<std::vector<BinaryDescriptor>> groups(centers.size());
    for (size_t i = 0; i < members.size(); ++i) groups[assign[i]].push_back(data[members[i]]);
    for (size_t c = 0; c < centers.size(); ++c) {
      if (!groups[c].empty()) centers[c] = majority_descriptor(groups[c]);
    }
  }
  // Drop duplicate centers so descent never has to break a zero-distance tie.
  std::vector<BinaryDescriptor> unique;
  for (const auto& c : centers) {
    if (std::find(unique.begin(), unique.end(), c) == unique.end()) unique.push_back(c);
  }
  centers = std::move(unique);

  Clustering out;
  std::vector<std::vector<uint32_t>> groups(centers.size());
  for (uint32_t m : members) groups[nearest_center(data[m], centers)].push_back(m);
  for (size_t c = 0; c < centers.size(); ++c) {
    if (groups[c].empty()) continue;
    out.centers.push_back(centers[c]);
    out.members.push_back(std::move(groups[c]));
  }
  return out;
}

}  // namespace

uint32_t NodePath::node_at_level(int level) const {
  if (nodes.empty()) return 0;
  const size_t idx = static_cast<size_t>(std::max(level, 1) - 1);
  return nodes[std::min(idx, nodes.size() - 1)];
}

size_t TrainingSet::descriptor_count() const {
  size_t n = 0;
  for (const auto& img : images) n += img.size();
  return n;
}

BinaryDescriptor majority_descriptor(std::span<const BinaryDescriptor> ds) {
  std::array<int, BinaryDescriptor::kBits> counts{};
  for (const auto& d : ds) {
    for (int w = 0; w < 4; ++w) {
      uint64_t bits = d.words[w];
      while (bits) {
        const int b = std::countr_zero(bits);
        ++counts[64 * w + b];
        bits &= bits - 1;
      }
    }
  }
  BinaryDescriptor out;
  for (int i = 0; i < BinaryDescriptor::kBits; ++i) {
    if (2 * counts[i] > static_cast<int>(ds.size())) out.set_bit(i, true);
  }
  return out;
}

VocabularyTree build_vocabulary(const TrainingSet& training, int k, int levels, uint64_t seed) {
  if (k < 2) throw InvalidArgument("vocabulary branching factor must be >= 2");
  if (levels < 1) throw InvalidArgument("vocabulary depth must be >= 1");
  std::vector<BinaryDescriptor> data;
  std::vector<uint32_t> image_of;
  for (size_t img = 0; img < training.images.size(); ++img) {
    for (const auto& d : training.images[img]) {
      data.push_back(d);
      image_of.push_back(static_cast<uint32_t>(img));
    }
  }
  if (data.size() < static_cast<size_t>(k)) {
    throw InvalidArgument("vocabulary needs at least k training descriptors");
  }

  VocabularyTree tree;
  tree.k_ = k;
  tree.levels_ = levels;
  tree.nodes_.emplace_back();
  tree.nodes_[0].center = majority_descriptor(data);

  struct Pending {
    uint32_t node;
    int level;
    std::vector<uint32_t> members;
  };
  std::deque<Pending> queue;
  std::vector<uint32_t> all(data.size());
  for (uint32_t i = 0; i < all.size(); ++i) all[i] = i;
  queue.push_back({0, 0, std::move(all)});
  // Members of each leaf, kept for the self-quantisation fix-up.
  std::vector<std::vector<uint32_t>> leaf_members;

  while (!queue.empty()) {
    Pending item = std::move(queue.front());
    queue.pop_front();
    Clustering clusters;
    const bool can_split = item.level < levels && item.members.size() >= static_cast<size_t>(k);
    if (can_split) {
      Random rng(mix_seed(seed, item.node));
      clusters = k_majority(data, item.members, k, rng);
    }
    if (!can_split || clusters.centers.size() < 2) {
      auto& node = tree.nodes_[item.node];
      node.word_id = static_cast<int32_t>(tree.word_node_.size());
      tree.word_node_.push_back(item.node);
      leaf_members.push_back(std::move(item.members));
      continue;
    }
    const auto first = static_cast<uint32_t>(tree.nodes_.size());
    tree.nodes_[item.node].first_child = first;
    tree.nodes_[item.node].n_children = static_cast<uint32_t>(clusters.centers.size());
    for (size_t c = 0; c < clusters.centers.size(); ++c) {
      VocabularyNode child;
      child.center = clusters.centers[c];
      tree.nodes_.push_back(child);
    }
    for (size_t c = 0; c < clusters.centers.size(); ++c) {
      queue.push_back({first + static_cast<uint32_t>(c), item.level + 1, std::move(clusters.members[c])});
    }
  }
  tree.finalize();

  // A majority center can land nearer to a cousin branch than to its own
  // ancestors. Swap such centers for the closest member that descends back.
  for (uint32_t w = 0; w < tree.word_node_.size(); ++w) {
    if (tree.word_of(tree.word_center(w)) == w) continue;
    auto& members = leaf_members[w];
    const BinaryDescriptor original = tree.word_center(w);
    std::stable_sort(members.begin(), members.end(), [&](uint32_t a, uint32_t b) {
      return hamming(data[a], original) < hamming(data[b], original);
    });
    for (uint32_t m : members) {
      tree.nodes_[tree.word_node_[w]].center = data[m];
      if (tree.word_of(data[m]) == w) break;
      tree.nodes_[tree.word_node_[w]].center = original;
    }
  }

  // idf = ln(N / n_w) over training images; unseen words count once.
  const double n_images = static_cast<double>(std::max<size_t>(training.images.size(), 1));
  std::vector<uint32_t> last_image(tree.word_count(), std::numeric_limits<uint32_t>::max());
  std::vector<double> occurrences(tree.word_count(), 0.0);
  for (size_t i = 0; i < data.size(); ++i) {
    const uint32_t w = tree.word_of(data[i]);
    if (last_image[w] != image_of[i]) {
      last_image[w] = image_of[i];
      occurrences[w] += 1.0;
    }
  }
  tree.idf_.resize(tree.word_count());
  for (size_t w = 0; w < tree.idf_.size(); ++w) {
    tree.idf_[w] = std::log(n_images / std::max(occurrences[w], 1.0));
  }
  return tree;
}

void VocabularyTree::finalize() {
  node_level_.assign(nodes_.size(), 0);
  parent_.assign(nodes_.size(), 0);
  word_node_.clear();
  for (uint32_t i = 0; i < nodes_.size(); ++i) {
    const auto& n = nodes_[i];
    for (uint32_t c = 0; c < n.n_children; ++c) {
      if (n.first_child + c >= nodes_.size()) throw FormatError("vocabulary child index out of range");
      node_level_[n.first_child + c] = node_level_[i] + 1;
      parent_[n.first_child + c] = i;
    }
    if (n.word_id >= 0) {
      if (static_cast<size_t>(n.word_id) >= word_node_.size()) word_node_.resize(n.word_id + 1, UINT32_MAX);
      word_node_[n.word_id] = i;
    }
  }
  for (uint32_t w : word_node_) {
    if (w == UINT32_MAX) throw FormatError("vocabulary word ids are not contiguous");
  }
}

NodePath VocabularyTree::quantize(const BinaryDescriptor& d) const {
  NodePath path;
  uint32_t id = 0;
  while (nodes_[id].n_children > 0) {
    const auto& n = nodes_[id];
    uint32_t best = n.first_child;
    int best_dist = std::numeric_limits<int>::max();
    for (uint32_t c = n.first_child; c < n.first_child + n.n_children; ++c) {
      const int dist = hamming(d, nodes_[c].center);
      if (dist < best_dist) {
        best_dist = dist;
        best = c;
      }
    }
    id = best;
    path.nodes.push_back(id);
  }
  if (path.nodes.empty()) path.nodes.push_back(0);  // single-leaf tree
  path.word = static_cast<uint32_t>(nodes_[id].word_id);
  return path;
}

NodePath VocabularyTree::path_of_word(uint32_t word) const {
  NodePath path;
  path.word = word;
  uint32_t id = word_node_.at(word);
  while (id != 0) {
    path.nodes.push_back(id);
    id = parent_[id];
  }
  if (path.nodes.empty()) path.nodes.push_back(0);
  std::reverse(path.nodes.begin(), path.nodes.end());
  return path;
}

uint32_t VocabularyTree::word_of(const BinaryDescriptor& d) const { return quantize(d).word; }

BowVector VocabularyTree::to_bow_words(std::span<const uint32_t> words) const {
  BowVector bow;
  for (uint32_t w : words) {
    if (idf_.at(w) > 0.0) bow[w] += idf_[w];
  }
  double total = 0.0;
  for (const auto& [w, v] : bow) total += v;
  if (total > 0.0) {
    for (auto& [w, v] : bow) v /= total;
  }
  return bow;
}

BowVector VocabularyTree::to_bow(std::span<const BinaryDescriptor> ds) const {
  std::vector<uint32_t> words;
  words.reserve(ds.size());
  for (const auto& d : ds) words.push_back(word_of(d));
  return to_bow_words(words);
}

std::vector<uint8_t> VocabularyTree::serialize() const {
  ByteWriter out;
  out.put_bytes(kMagic, sizeof(kMagic));
  out.put<uint32_t>(kVersion);
  out.put<uint32_t>(0);
  out.put<uint32_t>(static_cast<uint32_t>(k_));
  out.put<uint32_t>(static_cast<uint32_t>(levels_));
  out.put<uint32_t>(static_cast<uint32_t>(nodes_.size()));
  for (const auto& n : nodes_) {
    for (int b = 0; b < BinaryDescriptor::kBytes; ++b) out.put<uint8_t>(n.center.byte(b));
    out.put<uint32_t>(n.first_child);
    out.put<uint32_t>(n.n_children);
    out.put<int32_t>(n.word_id);
  }
  out.put<uint32_t>(static_cast<uint32_t>(idf_.size()));
  for (double v : idf_) out.put<double>(v);
  return out.take();
}

VocabularyTree VocabularyTree::deserialize(const std::vector<uint8_t>& bytes) {
  ByteReader in(bytes);
  char magic[8];
  in.get_bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw FormatError("not a vocabulary file");
  if (in.get<uint32_t>() != kVersion) throw FormatError("unsupported vocabulary version");
  in.get<uint32_t>();
  VocabularyTree tree;
  tree.k_ = static_cast<int>(in.get<uint32_t>());
  tree.levels_ = static_cast<int>(in.get<uint32_t>());
  const uint32_t n_nodes = in.get<uint32_t>();
  if (n_nodes == 0) throw FormatError("vocabulary has no nodes");
  tree.nodes_.resize(n_nodes);
  for (auto& n : tree.nodes_) {
    for (int b = 0; b < BinaryDescriptor::kBytes; ++b) n.center.set_byte(b, in.get<uint8_t>());
    n.first_child = in.get<uint32_t>();
    n.n_children = in.get<uint32_t>();
    n.word_id = in.get<int32_t>();
  }
  const uint32_t n_words = in.get<uint32_t>();
  tree.idf_.resize(n_words);
  for (auto& v : tree.idf_) v = in.get<double>();
  if (!in.at_end()) throw FormatError("trailing bytes in vocabulary file");
  tree.finalize();
  if (tree.word_node_.size() != n_words) throw FormatError("vocabulary idf table size mismatch");
  return tree;
}

void VocabularyTree::save(const std::string& path) const { write_file_bytes(path, serialize()); }

VocabularyTree VocabularyTree::load(const std::string& path) {
  return deserialize(read_file_bytes(path));
}

uint64_t VocabularyTree::hash() const {
  const auto bytes = serialize();
  return fnv1a64(bytes.data(), bytes.size());
}

TrainingSet read_training_set(const std::string& path) {
  std::istringstream in(read_text_file(path));
  TrainingSet out;
  std::string line;
  size_t remaining = 0;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (remaining == 0) {
      std::istringstream hdr(line);
      std::string tag;
      long long n = -1;
      if (!(hdr >> tag >> n) || tag != "image" || n < 0) {
        throw FormatError("corpus: expected 'image <n>' header, got '" + line + "'");
      }
      out.images.emplace_back();
      remaining = static_cast<size_t>(n);
      continue;
    }
    out.images.back().push_back(descriptor_from_hex(line));
    --remaining;
  }
  if (remaining != 0) throw FormatError("corpus: truncated image block");
  return out;
}

void write_training_set(const std::string& path, const TrainingSet& training) {
  std::ostringstream out;
  for (const auto& img : training.images) {
    out << "image " << img.size() << '\n';
    for (const auto& d : img) out << to_hex(d) << '\n';
  }
  write_text_file(path, out.str());
}

}  // namespace objslam
