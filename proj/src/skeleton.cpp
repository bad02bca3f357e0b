#include "gdream/skeleton.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "file_util.hpp"
#include "gdream/error.hpp"
#include "gdream/rng.hpp"

namespace gdream {

namespace {

constexpr std::string_view kLeft = "Left";
constexpr std::string_view kRight = "Right";

Vec3 vec3_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw FormatError("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

nlohmann::json vec3_to_json(const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

}  // namespace

std::string_view base_semantic(std::string_view name) {
  std::string_view stem = name;
  if (stem.starts_with(kLeft)) {
    stem.remove_prefix(kLeft.size());
  } else if (stem.starts_with(kRight)) {
    stem.remove_prefix(kRight.size());
  }
  for (auto semantic : kKeySemantics) {
    if (stem == semantic) return semantic;
  }
  return {};
}

bool is_valid_semantic(std::string_view name) { return !base_semantic(name).empty(); }

bool is_end_effector(std::string_view name) {
  const auto stem = base_semantic(name);
  return stem == "Toe" || stem == "Hand";
}

int SkeletonGraph::key_joint(std::string_view semantic) const {
  const auto it = key_joints.find(std::string(semantic));
  return it == key_joints.end() ? -1 : it->second;
}

std::vector<int> SkeletonGraph::resolved_key_links() const {
  if (!key_links.empty()) return key_links;
  std::set<int> links;
  for (const auto& [semantic, index] : key_joints) {
    const auto stem = base_semantic(semantic);
    if (index > 0 && (stem == "Knee" || stem == "Ankle")) links.insert(index);
  }
  return {links.begin(), links.end()};
}

std::vector<std::vector<int>> SkeletonGraph::children() const {
  std::vector<std::vector<int>> result(parent_index.size());
  for (int j = 1; j < joint_count(); ++j) result[parent_index[j]].push_back(j);
  return result;
}

void SkeletonGraph::validate() const {
  const int count = joint_count();
  if (count < 1) throw StructureError("skeleton '" + name + "' has no joints");
  const auto n = static_cast<std::size_t>(count);
  if (joint_names.size() != n || axes.size() != n || link_vectors.size() != n) {
    throw StructureError("skeleton '" + name + "': per-joint field sizes disagree");
  }
  if (parent_index[0] != -1) throw StructureError("joint 0 must be the base (parent -1)");
  for (int j = 1; j < count; ++j) {
    if (parent_index[j] == -1) {
      throw StructureError("skeleton '" + name + "' has several roots (joint " +
                           joint_names[j] + ")");
    }
    if (parent_index[j] < 0 || parent_index[j] >= j) {
      throw StructureError("joint " + joint_names[j] + " must come after its parent");
    }
    if (std::abs(axes[j].norm() - 1.0) > 1e-9) {
      throw DomainError("axis of joint " + joint_names[j] + " is not unit length");
    }
    if (!link_vectors[j].allFinite()) {
      throw DomainError("link vector of joint " + joint_names[j] + " is not finite");
    }
  }
  if (!axes[0].isZero(0.0) || !link_vectors[0].isZero(0.0)) {
    throw DomainError("base joint must have zero axis and link vector");
  }
  if (relation != build_relation_matrix(parent_index)) {
    throw StructureError("relation matrix of '" + name + "' disagrees with parent_index");
  }
  std::set<int> used;
  for (const auto& [semantic, index] : key_joints) {
    if (!is_valid_semantic(semantic)) throw DomainError("unknown key-joint semantic '" + semantic + "'");
    if (index < -1 || index >= count) {
      throw DomainError("key joint " + semantic + " index out of range");
    }
    if (index >= 0 && !used.insert(index).second) {
      throw DomainError("joint index " + std::to_string(index) + " carries two key semantics");
    }
  }
  for (int link : key_links) {
    if (link < 1 || link >= count) throw DomainError("key link index out of range");
  }
}

bool operator==(const SkeletonGraph& a, const SkeletonGraph& b) {
  return a.name == b.name && a.joint_names == b.joint_names && a.parent_index == b.parent_index &&
         a.axes == b.axes && a.link_vectors == b.link_vectors && a.relation == b.relation &&
         a.key_joints == b.key_joints && a.key_links == b.key_links;
}

RelationMatrix build_relation_matrix(std::span<const int> parent_index) {
  const int count = static_cast<int>(parent_index.size());
  if (count == 0) throw StructureError("empty parent list");
  if (parent_index[0] != -1) throw StructureError("joint 0 must be the root");
  for (int j = 1; j < count; ++j) {
    const int parent = parent_index[j];
    if (parent == -1) throw StructureError("multiple roots: joint " + std::to_string(j));
    if (parent < 0 || parent >= count || parent == j) {
      throw StructureError("invalid parent for joint " + std::to_string(j));
    }
    // Every chain must reach the root within `count` hops.
    int cursor = j;
    int hops = 0;
    while (cursor != 0) {
      cursor = parent_index[cursor];
      if (++hops > count) throw StructureError("cycle through joint " + std::to_string(j));
    }
  }
  RelationMatrix relation = RelationMatrix::Zero(count, count);
  for (int j = 0; j < count; ++j) {
    relation(j, j) = kSelf;
    if (j > 0) {
      relation(parent_index[j], j) = kParentOf;
      relation(j, parent_index[j]) = kChildOf;
    }
  }
  return relation;
}

SkeletonGraph with_key_joints(SkeletonGraph graph,
                              const std::map<std::string, std::string>& by_joint_name) {
  for (const auto& [semantic, joint_name] : by_joint_name) {
    if (!is_valid_semantic(semantic)) throw ConfigError("unknown key-joint semantic '" + semantic + "'");
    if (joint_name.empty()) {
      graph.key_joints[semantic] = -1;
      continue;
    }
    const auto it = std::find(graph.joint_names.begin(), graph.joint_names.end(), joint_name);
    if (it == graph.joint_names.end()) {
      throw ConfigError("key joint " + semantic + " names unknown joint '" + joint_name + "'");
    }
    graph.key_joints[semantic] = static_cast<int>(it - graph.joint_names.begin());
  }
  graph.validate();
  return graph;
}

Eigen::MatrixXi JointMap::eta() const {
  Eigen::MatrixXi result = Eigen::MatrixXi::Zero(source_joint_count, target_joint_count);
  for (const auto& pair : pairs) {
    if (pair.active()) result(pair.source, pair.target) = 1;
  }
  return result;
}

std::vector<JointPair> JointMap::active_pairs() const {
  std::vector<JointPair> result;
  for (const auto& pair : pairs) {
    if (pair.active()) result.push_back(pair);
  }
  return result;
}

void JointMap::validate() const {
  std::set<int> sources;
  std::set<int> targets;
  for (const auto& pair : pairs) {
    if (!is_valid_semantic(pair.semantic)) {
      throw DomainError("unknown semantic '" + pair.semantic + "' in joint map");
    }
    if (pair.source < -1 || pair.source >= source_joint_count || pair.target < -1 ||
        pair.target >= target_joint_count) {
      throw DomainError("joint map index out of range for " + pair.semantic);
    }
    if (!pair.active()) continue;
    if (!sources.insert(pair.source).second || !targets.insert(pair.target).second) {
      throw DomainError("joint map pairs a joint twice (" + pair.semantic + ")");
    }
  }
}

JointMap build_joint_map(const SkeletonGraph& source, const SkeletonGraph& target) {
  std::set<std::string> semantics;
  for (const auto& [name, index] : source.key_joints) semantics.insert(name);
  for (const auto& [name, index] : target.key_joints) semantics.insert(name);

  JointMap map;
  map.source_joint_count = source.joint_count();
  map.target_joint_count = target.joint_count();
  for (const auto& semantic : semantics) {
    map.pairs.push_back({semantic, source.key_joint(semantic), target.key_joint(semantic)});
  }
  return map;
}

Eigen::MatrixXi extend_joint_map(const JointMap& map, int frames) {
  if (frames < 1) throw DomainError("temporal extension needs at least one frame");
  const int js = map.source_joint_count;
  const int jt = map.target_joint_count;
  Eigen::MatrixXi extended = Eigen::MatrixXi::Zero(frames * jt, frames * js);
  const Eigen::MatrixXi eta_t = map.eta().transpose();
  for (int t = 0; t < frames; ++t) extended.block(t * jt, t * js, jt, js) = eta_t;
  return extended;
}

void AugmentationPolicy::validate() const {
  if (!(key_min > 0.0) || !(other_min > 0.0) || key_max < key_min || other_max < other_min) {
    throw ConfigError("augmentation scale ranges must be positive and ordered");
  }
}

SkeletonGraph augment_skeleton(const SkeletonGraph& graph, std::uint64_t seed,
                               const AugmentationPolicy& policy) {
  policy.validate();
  const auto key_links = graph.resolved_key_links();
  const std::set<int> key_set(key_links.begin(), key_links.end());
  Rng rng(seed);
  std::map<int, double> factors;
  for (int j = 1; j < graph.joint_count(); ++j) {
    const bool key = key_set.count(j) > 0;
    const double lo = key ? policy.key_min : policy.other_min;
    const double hi = key ? policy.key_max : policy.other_max;
    const double u = rng.uniform();
    factors[j] = lo == hi ? lo : std::exp(std::log(lo) + u * (std::log(hi) - std::log(lo)));
  }
  return scale_links(graph, factors);
}

SkeletonGraph scale_links(const SkeletonGraph& graph, const std::map<int, double>& factors) {
  SkeletonGraph result = graph;
  for (const auto& [joint, factor] : factors) {
    if (joint < 1 || joint >= graph.joint_count()) throw DomainError("scaled link index out of range");
    if (!(factor > 0.0)) throw ConfigError("link scale factors must be positive");
    result.link_vectors[joint] *= factor;
  }
  return result;
}

JointMap augment_correspondence(const JointMap& map, std::uint64_t seed, double drop_prob) {
  if (!(drop_prob >= 0.0 && drop_prob <= 1.0)) throw ConfigError("drop probability must lie in [0, 1]");
  Rng rng(seed);
  JointMap result = map;
  for (auto& pair : result.pairs) {
    const double u = rng.uniform();
    if (pair.active() && !is_end_effector(pair.semantic) && u < drop_prob) pair.target = -1;
  }
  return result;
}

nlohmann::json graph_to_json(const SkeletonGraph& graph) {
  nlohmann::json j;
  j["name"] = graph.name;
  j["joint_names"] = graph.joint_names;
  j["parent_index"] = graph.parent_index;
  auto& axes = j["axes"] = nlohmann::json::array();
  auto& links = j["link_vectors"] = nlohmann::json::array();
  for (int i = 0; i < graph.joint_count(); ++i) {
    axes.push_back(vec3_to_json(graph.axes[i]));
    links.push_back(vec3_to_json(graph.link_vectors[i]));
  }
  auto& relation = j["relation_matrix"] = nlohmann::json::array();
  for (int r = 0; r < graph.relation.rows(); ++r) {
    auto row = nlohmann::json::array();
    for (int c = 0; c < graph.relation.cols(); ++c) row.push_back(graph.relation(r, c));
    relation.push_back(row);
  }
  j["key_joints"] = graph.key_joints;
  j["key_links"] = graph.key_links;
  return j;
}

SkeletonGraph graph_from_json(const nlohmann::json& j) {
  SkeletonGraph graph;
  try {
    graph.name = j.value("name", std::string());
    graph.joint_names = j.at("joint_names").get<std::vector<std::string>>();
    graph.parent_index = j.at("parent_index").get<std::vector<int>>();
    for (const auto& axis : j.at("axes")) graph.axes.push_back(vec3_from_json(axis));
    for (const auto& link : j.at("link_vectors")) graph.link_vectors.push_back(vec3_from_json(link));
    const auto& rows = j.at("relation_matrix");
    const auto count = static_cast<int>(rows.size());
    graph.relation.resize(count, count);
    for (int r = 0; r < count; ++r) {
      if (rows[r].size() != rows.size()) throw FormatError("relation_matrix must be square");
      for (int c = 0; c < count; ++c) graph.relation(r, c) = rows[r][c].get<int>();
    }
    graph.key_joints = j.at("key_joints").get<std::map<std::string, int>>();
    if (j.contains("key_links")) graph.key_links = j["key_links"].get<std::vector<int>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed graph file: ") + e.what());
  }
  graph.validate();
  return graph;
}

void save_graph(const SkeletonGraph& graph, const std::string& path) {
  detail::write_text_file(path, graph_to_json(graph).dump(2) + "\n");
}

SkeletonGraph load_graph(const std::string& path) {
  const auto text = detail::read_text_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("'" + path + "': " + e.what());
  }
  return graph_from_json(j);
}

nlohmann::json joint_map_to_json(const JointMap& map) {
  nlohmann::json j;
  j["source_joint_count"] = map.source_joint_count;
  j["target_joint_count"] = map.target_joint_count;
  auto& pairs = j["pairs"] = nlohmann::json::array();
  for (const auto& pair : map.pairs) pairs.push_back({pair.semantic, pair.source, pair.target});
  return j;
}

JointMap joint_map_from_json(const nlohmann::json& j) {
  JointMap map;
  try {
    map.source_joint_count = j.at("source_joint_count").get<int>();
    map.target_joint_count = j.at("target_joint_count").get<int>();
    for (const auto& record : j.at("pairs")) {
      if (!record.is_array() || record.size() != 3) throw FormatError("joint-map record needs 3 fields");
      map.pairs.push_back({record[0].get<std::string>(), record[1].get<int>(), record[2].get<int>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed joint map: ") + e.what());
  }
  map.validate();
  return map;
}

void save_joint_map(const JointMap& map, const std::string& path) {
  detail::write_text_file(path, joint_map_to_json(map).dump(2) + "\n");
}

JointMap load_joint_map(const std::string& path) {
  try {
    return joint_map_from_json(nlohmann::json::parse(detail::read_text_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("'" + path + "': " + e.what());
  }
}

std::map<std::string, std::string> load_key_joint_names(const std::string& path) {
  try {
    const auto j = nlohmann::json::parse(detail::read_text_file(path));
    std::map<std::string, std::string> result;
    for (const auto& [semantic, joint] : j.items()) {
      result[semantic] = joint.is_null() ? std::string() : joint.get<std::string>();
    }
    return result;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + path + "': " + e.what());
  }
}

}  // namespace gdream
