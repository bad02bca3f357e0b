#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace gdream {

using Vec3 = Eigen::Vector3d;

/// Relation codes stored in the relation matrix. Row relative to column:
/// `relation(i, j) == kParentOf` means joint i is the parent of joint j.
enum RelationCode : int {
  kUnrelated = 0,
  kSelf = 1,
  kParentOf = 2,
  kChildOf = 3,
};
inline constexpr int kRelationCodes = 4;

using RelationMatrix = Eigen::MatrixXi;

/// Semantic key joints. Names may carry a "Left" or "Right" prefix
/// ("LeftKnee"); sides are distinct semantics.
inline constexpr std::string_view kKeySemantics[] = {"Hip",      "Knee",  "Ankle", "Toe",
                                                     "Shoulder", "Elbow", "Hand"};

/// Strips the optional side prefix. Returns an empty view for unknown names.
std::string_view base_semantic(std::string_view name);
bool is_valid_semantic(std::string_view name);
/// Toe and Hand.
bool is_end_effector(std::string_view name);

/// Kinematic DAG of one robot.
///
/// Joint 0 is the floating base; every other joint is a 1-DoF revolute joint
/// with a unit axis `axes[j]` and a link vector `link_vectors[j]` running from
/// the parent joint origin to joint j at zero pose, both in the base frame.
/// Parents always precede their children in index order.
struct SkeletonGraph {
  std::string name;
  std::vector<std::string> joint_names;
  std::vector<int> parent_index;
  std::vector<Vec3> axes;
  std::vector<Vec3> link_vectors;
  RelationMatrix relation;
  std::map<std::string, int> key_joints;
  /// Joints whose incoming link is a key link for augmentation. Empty means
  /// the default: the Knee (thigh) and Ankle (calf) joints on every side.
  std::vector<int> key_links;

  int joint_count() const { return static_cast<int>(parent_index.size()); }

  /// Index of a semantic key joint, or -1.
  int key_joint(std::string_view semantic) const;

  /// Resolved key links (explicit list, or the thigh/calf default).
  std::vector<int> resolved_key_links() const;

  std::vector<std::vector<int>> children() const;

  /// Throws StructureError / DomainError when any invariant is violated.
  void validate() const;
};

bool operator==(const SkeletonGraph& a, const SkeletonGraph& b);

/// Builds the 4-code relation matrix from a parent list rooted at index 0.
RelationMatrix build_relation_matrix(std::span<const int> parent_index);

/// Attaches key-joint annotations given as semantic -> joint name. Unknown
/// joint names or semantics are a ConfigError.
SkeletonGraph with_key_joints(SkeletonGraph graph,
                              const std::map<std::string, std::string>& by_joint_name);

/// One correspondence record. A -1 index marks the semantic as absent.
struct JointPair {
  std::string semantic;
  int source = -1;
  int target = -1;

  bool active() const { return source >= 0 && target >= 0; }
  bool operator==(const JointPair&) const = default;
};

/// Correspondence between a source (reference) and a target skeleton.
struct JointMap {
  int source_joint_count = 0;
  int target_joint_count = 0;
  std::vector<JointPair> pairs;

  /// Binary matrix of shape source x target.
  Eigen::MatrixXi eta() const;
  std::vector<JointPair> active_pairs() const;
  void validate() const;

  bool operator==(const JointMap&) const = default;
};

JointMap build_joint_map(const SkeletonGraph& source, const SkeletonGraph& target);

/// Same-frame temporal extension, shape (T*J_target) x (T*J_source), with
/// entry [t*J_target + i][t*J_source + j] = eta(j, i).
Eigen::MatrixXi extend_joint_map(const JointMap& map, int frames);

struct AugmentationPolicy {
  double key_min = 0.5;
  double key_max = 2.0;
  double other_min = 0.67;
  double other_max = 1.5;

  void validate() const;
};

/// Rescales link lengths, keeping directions, axes and topology. Scale
/// factors are drawn log-uniformly from the policy ranges.
SkeletonGraph augment_skeleton(const SkeletonGraph& graph, std::uint64_t seed,
                               const AugmentationPolicy& policy);

/// Scales the incoming link of each listed joint by a fixed factor.
SkeletonGraph scale_links(const SkeletonGraph& graph, const std::map<int, double>& factors);

/// Drops non end-effector pairs independently with `drop_prob` by setting the
/// target index to -1.
JointMap augment_correspondence(const JointMap& map, std::uint64_t seed, double drop_prob);

// Graph and joint-map files.
nlohmann::json graph_to_json(const SkeletonGraph& graph);
SkeletonGraph graph_from_json(const nlohmann::json& j);
void save_graph(const SkeletonGraph& graph, const std::string& path);
SkeletonGraph load_graph(const std::string& path);

nlohmann::json joint_map_to_json(const JointMap& map);
JointMap joint_map_from_json(const nlohmann::json& j);
void save_joint_map(const JointMap& map, const std::string& path);
JointMap load_joint_map(const std::string& path);

/// Sidecar key-joint file: {"Hip": "left_hip_pitch", ...}.
std::map<std::string, std::string> load_key_joint_names(const std::string& path);

}  // namespace gdream
