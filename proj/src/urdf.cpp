#include "gdream/urdf.hpp"

#include <Eigen/Geometry>
#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>

#include <map>
#include <optional>
#include <sstream>

#include "file_util.hpp"
#include "gdream/error.hpp"

namespace gdream {

namespace {

namespace pt = boost::property_tree;

struct UrdfJoint {
  std::string name;
  std::string type;
  std::string parent;
  std::string child;
  Vec3 xyz = Vec3::Zero();
  Vec3 rpy = Vec3::Zero();
  Vec3 axis = Vec3::UnitX();
};

Vec3 parse_triple(const std::string& text, const std::string& context) {
  std::istringstream in(text);
  Vec3 v;
  if (!(in >> v.x() >> v.y() >> v.z())) throw ParseError("expected three numbers in " + context);
  std::string rest;
  if (in >> rest) throw ParseError("trailing data in " + context);
  return v;
}

std::optional<Vec3> optional_triple(const pt::ptree& element, const std::string& child,
                                    const std::string& attribute, const std::string& context) {
  const auto node = element.get_child_optional(child + ".<xmlattr>." + attribute);
  if (!node) return std::nullopt;
  return parse_triple(node->data(), context);
}

Eigen::Matrix3d rpy_matrix(const Vec3& rpy) {
  return (Eigen::AngleAxisd(rpy.z(), Vec3::UnitZ()) * Eigen::AngleAxisd(rpy.y(), Vec3::UnitY()) *
          Eigen::AngleAxisd(rpy.x(), Vec3::UnitX()))
      .toRotationMatrix();
}

UrdfJoint read_joint(const pt::ptree& element) {
  UrdfJoint joint;
  joint.name = element.get<std::string>("<xmlattr>.name", "");
  joint.type = element.get<std::string>("<xmlattr>.type", "");
  if (joint.name.empty()) throw ParseError("joint without a name");
  joint.parent = element.get<std::string>("parent.<xmlattr>.link", "");
  joint.child = element.get<std::string>("child.<xmlattr>.link", "");
  if (joint.parent.empty() || joint.child.empty()) {
    throw ParseError("joint '" + joint.name + "' needs parent and child links");
  }
  const std::string context = "joint '" + joint.name + "'";
  if (auto xyz = optional_triple(element, "origin", "xyz", context)) joint.xyz = *xyz;
  if (auto rpy = optional_triple(element, "origin", "rpy", context)) joint.rpy = *rpy;
  if (auto axis = optional_triple(element, "axis", "xyz", context)) joint.axis = *axis;
  return joint;
}

struct LinkPose {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Vec3 position = Vec3::Zero();
  int owner = 0;
};

}  // namespace

SkeletonGraph parse_urdf(const std::string& urdf_text) {
  pt::ptree tree;
  std::istringstream stream(urdf_text);
  try {
    pt::read_xml(stream, tree);
  } catch (const pt::xml_parser_error& e) {
    throw ParseError("malformed XML: " + e.message(), static_cast<int>(e.line()));
  }
  const auto robot = tree.get_child_optional("robot");
  if (!robot) throw ParseError("missing <robot> element");

  std::vector<std::string> links;
  std::vector<UrdfJoint> joints;
  for (const auto& [tag, element] : *robot) {
    if (tag == "link") {
      links.push_back(element.get<std::string>("<xmlattr>.name", ""));
    } else if (tag == "joint") {
      joints.push_back(read_joint(element));
    }
  }
  if (links.empty()) throw StructureError("URDF declares no links");

  std::map<std::string, int> parent_joint_of;
  std::map<std::string, std::vector<int>> joints_from;
  for (int i = 0; i < static_cast<int>(joints.size()); ++i) {
    const auto& joint = joints[i];
    if (joint.type == "prismatic" || joint.type == "planar" ||
        (joint.type != "revolute" && joint.type != "continuous" && joint.type != "fixed" &&
         joint.type != "floating")) {
      throw UnsupportedJointError(joint.name, joint.type);
    }
    for (const auto& link : {joint.parent, joint.child}) {
      if (std::find(links.begin(), links.end(), link) == links.end()) {
        throw StructureError("joint '" + joint.name + "' references unknown link '" + link + "'");
      }
    }
    if (!parent_joint_of.emplace(joint.child, i).second) {
      throw StructureError("link '" + joint.child + "' has more than one parent joint");
    }
    joints_from[joint.parent].push_back(i);
  }

  std::vector<std::string> roots;
  for (const auto& link : links) {
    if (!parent_joint_of.count(link)) roots.push_back(link);
  }
  if (roots.size() != 1) {
    throw StructureError("URDF must have exactly one root link, found " + std::to_string(roots.size()));
  }

  std::string base_link = roots.front();
  for (const auto& joint : joints) {
    if (joint.type != "floating") continue;
    if (joint.parent != roots.front() || joints_from[joint.parent].size() != 1) {
      throw StructureError("floating joint '" + joint.name + "' must be the only joint on the root link");
    }
    base_link = joint.child;
  }

  SkeletonGraph graph;
  graph.name = robot->get<std::string>("<xmlattr>.name", "");
  graph.joint_names.push_back(base_link);
  graph.parent_index.push_back(-1);
  graph.axes.push_back(Vec3::Zero());
  graph.link_vectors.push_back(Vec3::Zero());

  std::vector<Vec3> joint_origins{Vec3::Zero()};
  // A joint's index is assigned while expanding its parent link, after the
  // owner of that link was numbered, so parents always precede children.
  std::vector<std::pair<std::string, LinkPose>> stack{{base_link, LinkPose{}}};
  std::size_t visited = 0;
  while (!stack.empty()) {
    auto [link, pose] = stack.back();
    stack.pop_back();
    if (++visited > links.size()) throw StructureError("cycle in URDF link tree");
    const auto& outgoing = joints_from[link];
    for (auto it = outgoing.rbegin(); it != outgoing.rend(); ++it) {
      const auto& joint = joints[*it];
      if (joint.type == "floating") throw StructureError("floating joint below the base: " + joint.name);
      LinkPose child;
      child.rotation = pose.rotation * rpy_matrix(joint.rpy);
      child.position = pose.position + pose.rotation * joint.xyz;
      child.owner = pose.owner;
      if (joint.type != "fixed") {
        if (joint.axis.norm() < 1e-12) throw ParseError("zero axis on joint '" + joint.name + "'");
        const int index = static_cast<int>(graph.parent_index.size());
        graph.joint_names.push_back(joint.name);
        graph.parent_index.push_back(pose.owner);
        graph.axes.push_back((child.rotation * joint.axis).normalized());
        graph.link_vectors.push_back(child.position - joint_origins[pose.owner]);
        joint_origins.push_back(child.position);
        child.owner = index;
      }
      stack.emplace_back(joint.child, child);
    }
  }
  graph.relation = build_relation_matrix(graph.parent_index);
  graph.validate();
  return graph;
}

SkeletonGraph parse_urdf_file(const std::string& path) { return parse_urdf(detail::read_text_file(path)); }

}  // namespace gdream
