#include "objslam/database.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#include "objslam/binary_io.h"
#include "objslam/errors.h"

namespace objslam {
namespace {

constexpr char kMagic[8] = {'O', 'S', 'L', 'M', 'O', 'B', 'D', 'B'};
constexpr uint32_t kVersion = 1;

// Per-word term for the union of supports, written so that shared words can be
// corrected from the "all disjoint" baseline.
double shared_term(double v, double w, Metric metric) {
  switch (metric) {
    case Metric::kL1:
      return std::abs(v - w) - v - w;
    case Metric::kL2:
      return (v - w) * (v - w) - v * v - w * w;
    case Metric::kChi2:
      return (v - w) * (v - w) / (v + w) - v - w;
    case Metric::kBhattacharyya:
      return -std::sqrt(v * w);
    case Metric::kKl:
      break;
  }
  return 0.0;
}

}  // namespace

RawModel parse_raw_model(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  auto next_line = [&]() -> std::string {
    while (std::getline(in, line)) {
      const auto first = line.find_first_not_of(" \t");
      if (first == std::string::npos || line[first] == '#') continue;
      const auto last = line.find_last_not_of(" \t");
      return line.substr(first, last - first + 1);
    }
    throw FormatError("model file truncated");
  };
  RawModel model;
  {
    std::istringstream hdr(next_line());
    std::string tag;
    long long id = -1, n = -1;
    if (!(hdr >> tag >> id >> n) || tag != "model" || id < 0 || n < 0) {
      throw FormatError("model file: expected 'model <id> <n_points>'");
    }
    model.id = static_cast<uint32_t>(id);
    model.points.resize(static_cast<size_t>(n));
  }
  for (auto& p : model.points) {
    std::istringstream row(next_line());
    long long n_desc = -1;
    if (!(row >> p.position.x() >> p.position.y() >> p.position.z() >> n_desc) || n_desc < 1) {
      throw FormatError("model file: bad point line");
    }
    for (long long i = 0; i < n_desc; ++i) p.descriptors.push_back(descriptor_from_hex(next_line()));
  }
  return model;
}

RawModel read_raw_model(const std::string& path) { return parse_raw_model(read_text_file(path)); }

std::string format_raw_model(const RawModel& model) {
  std::ostringstream out;
  out.precision(9);
  out << std::fixed;
  out << "model " << model.id << ' ' << model.points.size() << '\n';
  for (const auto& p : model.points) {
    out << p.position.x() << ' ' << p.position.y() << ' ' << p.position.z() << ' '
        << p.descriptors.size() << '\n';
    for (const auto& d : p.descriptors) out << to_hex(d) << '\n';
  }
  return out.str();
}

void write_raw_model(const std::string& path, const RawModel& model) {
  write_text_file(path, format_raw_model(model));
}

ObjectModel build_model(const RawModel& raw, const VocabularyTree& vocab) {
  if (raw.points.empty()) throw InvalidArgument("model has no points");
  ObjectModel model;
  model.id = raw.id;
  std::vector<uint32_t> words;
  for (const auto& p : raw.points) {
    if (p.descriptors.empty()) throw InvalidArgument("model point without descriptors");
    std::map<uint32_t, std::vector<BinaryDescriptor>> by_word;
    std::map<uint32_t, NodePath> path_of;
    for (const auto& d : p.descriptors) {
      NodePath path = vocab.quantize(d);
      by_word[path.word].push_back(d);
      path_of.emplace(path.word, std::move(path));
    }
    std::vector<ModelDescriptor> reps;
    for (const auto& [word, group] : by_word) {
      reps.push_back({majority_descriptor(group), path_of.at(word)});
      words.push_back(word);
    }
    model.points.push_back(p.position);
    model.descriptors.push_back(std::move(reps));
  }
  model.bow = vocab.to_bow_words(words);
  for (const auto& x : model.points) model.centroid += x;
  model.centroid /= static_cast<double>(model.points.size());
  for (const auto& x : model.points) model.radius = std::max(model.radius, (x - model.centroid).norm());
  return model;
}

double kl_score(const BowVector& v, const BowVector& w, double epsilon) {
  double s = 0.0;
  for (const auto& [word, vi] : v) {
    const auto it = w.find(word);
    if (it != w.end()) s += vi * std::log(epsilon / it->second);
  }
  return s;
}

double kl_divergence_full(const BowVector& v, const BowVector& w, double epsilon) {
  double s = 0.0;
  for (const auto& [word, vi] : v) {
    const auto it = w.find(word);
    const double wi = it == w.end() ? epsilon : it->second;
    s += vi * std::log(vi / wi);
  }
  return s;
}

Metric parse_metric(std::string_view name) {
  if (name == "kl") return Metric::kKl;
  if (name == "bhattacharyya") return Metric::kBhattacharyya;
  if (name == "chi2") return Metric::kChi2;
  if (name == "l1" || name == "L1") return Metric::kL1;
  if (name == "l2" || name == "L2") return Metric::kL2;
  throw InvalidArgument("unknown metric '" + std::string(name) + "'");
}

std::string metric_name(Metric metric) {
  switch (metric) {
    case Metric::kKl:
      return "kl";
    case Metric::kBhattacharyya:
      return "bhattacharyya";
    case Metric::kChi2:
      return "chi2";
    case Metric::kL1:
      return "l1";
    case Metric::kL2:
      return "l2";
  }
  return "?";
}

double alt_score(const BowVector& v, const BowVector& w, Metric metric) {
  // Dense walk over the union of supports.
  auto a = v.begin();
  auto b = w.begin();
  double acc = 0.0;
  while (a != v.end() || b != w.end()) {
    double vi = 0.0, wi = 0.0;
    if (b == w.end() || (a != v.end() && a->first < b->first)) {
      vi = (a++)->second;
    } else if (a == v.end() || b->first < a->first) {
      wi = (b++)->second;
    } else {
      vi = (a++)->second;
      wi = (b++)->second;
    }
    switch (metric) {
      case Metric::kL1:
        acc += std::abs(vi - wi);
        break;
      case Metric::kL2:
        acc += (vi - wi) * (vi - wi);
        break;
      case Metric::kChi2:
        if (vi + wi > 0.0) acc += (vi - wi) * (vi - wi) / (vi + wi);
        break;
      case Metric::kBhattacharyya:
        acc += std::sqrt(vi * wi);
        break;
      case Metric::kKl:
        throw InvalidArgument("use kl_score for the KL metric");
    }
  }
  if (metric == Metric::kL2) return std::sqrt(acc);
  if (metric == Metric::kBhattacharyya) return 1.0 - acc;
  return acc;
}

double alt_score(const BowVector& v, const BowVector& w, std::string_view metric) {
  return alt_score(v, w, parse_metric(metric));
}

ObjectDatabase::ObjectDatabase(const VocabularyTree& vocab, int direct_level, double epsilon)
    : vocab_(&vocab), direct_level_(direct_level), epsilon_(epsilon) {
  if (direct_level < 1) throw InvalidArgument("direct index level must be >= 1");
  if (!(epsilon > 0.0)) throw InvalidArgument("epsilon must be positive");
  inverted_.resize(vocab.word_count());
}

uint32_t ObjectDatabase::add_model(ObjectModel model) {
  if (slot_of_.count(model.id)) throw InvalidArgument("duplicate model id " + std::to_string(model.id));
  const size_t slot = models_.size();
  const uint32_t id = model.id;
  double sq = 0.0;
  for (const auto& [word, weight] : model.bow) {
    auto& list = inverted_.at(word);
    const InvertedEntry entry{id, weight};
    list.insert(std::upper_bound(list.begin(), list.end(), entry,
                                 [](const InvertedEntry& a, const InvertedEntry& b) {
                                   return a.model_id < b.model_id;
                                 }),
                entry);
    sq += weight * weight;
  }
  std::map<uint32_t, std::vector<DescriptorRef>> direct;
  for (uint32_t p = 0; p < model.descriptors.size(); ++p) {
    for (uint32_t d = 0; d < model.descriptors[p].size(); ++d) {
      direct[model.descriptors[p][d].path.node_at_level(direct_level_)].push_back({p, d});
    }
  }
  models_.push_back(std::move(model));
  slot_of_[id] = slot;
  self_sq_norm_.push_back(sq);
  direct_.push_back(std::move(direct));
  return id;
}

const ObjectModel& ObjectDatabase::model(uint32_t id) const {
  const auto it = slot_of_.find(id);
  if (it == slot_of_.end()) throw InvalidArgument("unknown model id " + std::to_string(id));
  return models_[it->second];
}

std::vector<uint32_t> ObjectDatabase::model_ids() const {
  std::vector<uint32_t> ids;
  for (const auto& [id, slot] : slot_of_) ids.push_back(id);
  return ids;
}

const std::map<uint32_t, std::vector<DescriptorRef>>& ObjectDatabase::direct(uint32_t model_id) const {
  const auto it = slot_of_.find(model_id);
  if (it == slot_of_.end()) throw InvalidArgument("unknown model id " + std::to_string(model_id));
  return direct_[it->second];
}

std::vector<Candidate> ObjectDatabase::query(const BowVector& v, int top_n, Metric metric) const {
  if (models_.empty()) throw InvalidArgument("query on an empty database");
  if (top_n < 1) throw InvalidArgument("top_n must be >= 1");
  // Scores accumulate over the inverted lists of the query's words only.
  std::map<uint32_t, double> acc;
  double v_sq = 0.0;
  for (const auto& [word, vi] : v) {
    v_sq += vi * vi;
    if (word >= inverted_.size()) continue;
    for (const auto& e : inverted_[word]) {
      const double term = metric == Metric::kKl ? vi * std::log(epsilon_ / e.weight)
                                                : shared_term(vi, e.weight, metric);
      acc[e.model_id] += term;
    }
  }
  std::vector<Candidate> out;
  out.reserve(acc.size());
  for (const auto& [id, s] : acc) {
    double score = s;
    switch (metric) {
      case Metric::kKl:
        break;
      case Metric::kL1:
      case Metric::kChi2:
        score = 2.0 + s;
        break;
      case Metric::kL2:
        score = std::sqrt(std::max(0.0, v_sq + self_sq_norm_[slot_of_.at(id)] + s));
        break;
      case Metric::kBhattacharyya:
        score = 1.0 + s;
        break;
    }
    out.push_back({id, score, -1});
  }
  std::sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) return a.score < b.score;
    return a.model_id < b.model_id;
  });
  if (out.size() > static_cast<size_t>(top_n)) out.resize(static_cast<size_t>(top_n));
  return out;
}

std::vector<DirectMatch> ObjectDatabase::direct_index_correspondences(
    std::span<const QueryFeature> features, uint32_t model_id, int max_distance) const {
  const ObjectModel& m = model(model_id);
  const auto& nodes = direct(model_id);

  // Group query features by their node at the direct-index level.
  std::map<uint32_t, std::vector<uint32_t>> by_node;
  for (uint32_t f = 0; f < features.size(); ++f) {
    by_node[features[f].path.node_at_level(direct_level_)].push_back(f);
  }

  std::vector<DirectMatch> raw;
  for (const auto& [node, feats] : by_node) {
    const auto it = nodes.find(node);
    if (it == nodes.end()) continue;
    const auto& refs = it->second;
    // Distance from each feature to each point in this node (min over the point's descriptors).
    std::map<uint32_t, size_t> point_col;
    for (const auto& r : refs) point_col.emplace(r.point, point_col.size());
    std::vector<uint32_t> col_point(point_col.size());
    for (const auto& [p, c] : point_col) col_point[c] = p;
    const int inf = std::numeric_limits<int>::max();
    std::vector<int> dist(feats.size() * point_col.size(), inf);
    for (size_t i = 0; i < feats.size(); ++i) {
      const auto& q = features[feats[i]].descriptor;
      for (const auto& r : refs) {
        const int d = hamming(q, m.descriptors[r.point][r.descriptor].descriptor);
        int& cell = dist[i * point_col.size() + point_col[r.point]];
        cell = std::min(cell, d);
      }
    }
    // Mutual nearest: ties resolve to the lower point index / lower feature index.
    const size_t n_cols = point_col.size();
    std::vector<size_t> best_row(n_cols, 0);
    for (size_t c = 0; c < n_cols; ++c) {
      for (size_t i = 1; i < feats.size(); ++i) {
        if (dist[i * n_cols + c] < dist[best_row[c] * n_cols + c]) best_row[c] = i;
      }
    }
    for (size_t i = 0; i < feats.size(); ++i) {
      size_t best_c = 0;
      for (size_t c = 1; c < n_cols; ++c) {
        if (dist[i * n_cols + c] < dist[i * n_cols + best_c]) best_c = c;
      }
      const int d = dist[i * n_cols + best_c];
      if (d >= max_distance || best_row[best_c] != i) continue;
      raw.push_back({feats[i], features[feats[i]].pixel, col_point[best_c], d});
    }
  }

  // A point can sit in several nodes; keep its closest feature overall.
  std::sort(raw.begin(), raw.end(), [](const DirectMatch& a, const DirectMatch& b) {
    if (a.point != b.point) return a.point < b.point;
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.feature < b.feature;
  });
  std::vector<DirectMatch> out;
  for (const auto& mt : raw) {
    if (!out.empty() && out.back().point == mt.point) continue;
    out.push_back(mt);
  }
  std::sort(out.begin(), out.end(),
            [](const DirectMatch& a, const DirectMatch& b) { return a.feature < b.feature; });
  return out;
}

std::vector<uint8_t> ObjectDatabase::serialize() const {
  ByteWriter out;
  out.put_bytes(kMagic, sizeof(kMagic));
  out.put<uint32_t>(kVersion);
  out.put<uint32_t>(0);
  out.put<uint64_t>(vocab_->hash());
  out.put<uint32_t>(static_cast<uint32_t>(direct_level_));
  out.put<double>(epsilon_);
  // Models in id order so the file is independent of insertion order.
  out.put<uint32_t>(static_cast<uint32_t>(models_.size()));
  for (const auto& [id, slot] : slot_of_) {
    const ObjectModel& m = models_[slot];
    out.put<uint32_t>(m.id);
    out.put<uint32_t>(static_cast<uint32_t>(m.points.size()));
    for (size_t p = 0; p < m.points.size(); ++p) {
      for (int a = 0; a < 3; ++a) out.put<double>(m.points[p](a));
      out.put<uint32_t>(static_cast<uint32_t>(m.descriptors[p].size()));
      for (const auto& d : m.descriptors[p]) {
        for (int b = 0; b < BinaryDescriptor::kBytes; ++b) out.put<uint8_t>(d.descriptor.byte(b));
        out.put<uint32_t>(d.path.word);
      }
    }
    out.put<uint32_t>(static_cast<uint32_t>(m.bow.size()));
    for (const auto& [word, weight] : m.bow) {
      out.put<uint32_t>(word);
      out.put<double>(weight);
    }
  }
  out.put<uint32_t>(static_cast<uint32_t>(inverted_.size()));
  for (const auto& list : inverted_) {
    out.put<uint32_t>(static_cast<uint32_t>(list.size()));
    for (const auto& e : list) {
      out.put<uint32_t>(e.model_id);
      out.put<double>(e.weight);
    }
  }
  for (const auto& [id, slot] : slot_of_) {
    out.put<uint32_t>(id);
    out.put<uint32_t>(static_cast<uint32_t>(direct_[slot].size()));
    for (const auto& [node, refs] : direct_[slot]) {
      out.put<uint32_t>(node);
      out.put<uint32_t>(static_cast<uint32_t>(refs.size()));
      for (const auto& r : refs) {
        out.put<uint32_t>(r.point);
        out.put<uint32_t>(r.descriptor);
      }
    }
  }
  return out.take();
}

ObjectDatabase ObjectDatabase::deserialize(const std::vector<uint8_t>& bytes,
                                           const VocabularyTree& vocab) {
  ByteReader in(bytes);
  char magic[8];
  in.get_bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw FormatError("not a database file");
  if (in.get<uint32_t>() != kVersion) throw FormatError("unsupported database version");
  in.get<uint32_t>();
  if (in.get<uint64_t>() != vocab.hash()) {
    throw FormatError("database was built with a different vocabulary");
  }
  const int level = static_cast<int>(in.get<uint32_t>());
  const double epsilon = in.get<double>();
  ObjectDatabase db(vocab, level, epsilon);

  // Word -> leaf path, rebuilt from the tree instead of being stored.
  auto path_of_word = [&](uint32_t word) {
    if (word >= vocab.word_count()) throw FormatError("database word id out of range");
    return vocab.path_of_word(word);
  };
  const uint32_t n_models = in.get<uint32_t>();
  for (uint32_t i = 0; i < n_models; ++i) {
    ObjectModel m;
    m.id = in.get<uint32_t>();
    const uint32_t n_points = in.get<uint32_t>();
    for (uint32_t p = 0; p < n_points; ++p) {
      Vec3 x;
      for (int a = 0; a < 3; ++a) x(a) = in.get<double>();
      m.points.push_back(x);
      const uint32_t n_desc = in.get<uint32_t>();
      std::vector<ModelDescriptor> reps(n_desc);
      for (auto& d : reps) {
        for (int b = 0; b < BinaryDescriptor::kBytes; ++b) d.descriptor.set_byte(b, in.get<uint8_t>());
        d.path = path_of_word(in.get<uint32_t>());
      }
      m.descriptors.push_back(std::move(reps));
    }
    const uint32_t n_bow = in.get<uint32_t>();
    for (uint32_t j = 0; j < n_bow; ++j) {
      const uint32_t word = in.get<uint32_t>();
      m.bow[word] = in.get<double>();
    }
    for (const auto& x : m.points) m.centroid += x;
    if (!m.points.empty()) m.centroid /= static_cast<double>(m.points.size());
    for (const auto& x : m.points) m.radius = std::max(m.radius, (x - m.centroid).norm());
    db.add_model(std::move(m));
  }
  // The stored indices must agree with the ones rebuilt from the models.
  const uint32_t n_words = in.get<uint32_t>();
  if (n_words != db.inverted_.size()) throw FormatError("inverted index size mismatch");
  for (uint32_t w = 0; w < n_words; ++w) {
    const uint32_t n = in.get<uint32_t>();
    if (n != db.inverted_[w].size()) throw FormatError("inverted index mismatch");
    for (uint32_t j = 0; j < n; ++j) {
      const uint32_t id = in.get<uint32_t>();
      const double weight = in.get<double>();
      if (db.inverted_[w][j].model_id != id || db.inverted_[w][j].weight != weight) {
        throw FormatError("inverted index mismatch");
      }
    }
  }
  for (uint32_t i = 0; i < n_models; ++i) {
    const uint32_t id = in.get<uint32_t>();
    const auto& direct = db.direct(id);
    const uint32_t n_nodes = in.get<uint32_t>();
    if (n_nodes != direct.size()) throw FormatError("direct index mismatch");
    for (uint32_t j = 0; j < n_nodes; ++j) {
      const uint32_t node = in.get<uint32_t>();
      const uint32_t n_refs = in.get<uint32_t>();
      const auto it = direct.find(node);
      if (it == direct.end() || it->second.size() != n_refs) throw FormatError("direct index mismatch");
      for (uint32_t r = 0; r < n_refs; ++r) {
        const uint32_t point = in.get<uint32_t>();
        const uint32_t desc = in.get<uint32_t>();
        if (it->second[r].point != point || it->second[r].descriptor != desc) {
          throw FormatError("direct index mismatch");
        }
      }
    }
  }
  if (!in.at_end()) throw FormatError("trailing bytes in database file");
  return db;
}

void ObjectDatabase::save(const std::string& path) const { write_file_bytes(path, serialize()); }

ObjectDatabase ObjectDatabase::load(const std::string& path, const VocabularyTree& vocab) {
  return deserialize(read_file_bytes(path), vocab);
}

}  // namespace objslam
