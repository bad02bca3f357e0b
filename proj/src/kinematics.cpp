#include "gdream/kinematics.hpp"

#include <cmath>

#include "gdream/error.hpp"

namespace gdream {

namespace {

constexpr double kTaylorThreshold = 1e-8;

// Rodrigues for a unit axis, without argument checks.
Mat3 rodrigues(const Vec3& axis, double angle) {
  const Mat3 k = skew(axis);
  return Mat3::Identity() + std::sin(angle) * k + (1.0 - std::cos(angle)) * (k * k);
}

}  // namespace

Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return m;
}

Mat3 rot_axis_angle(const Vec3& axis, double angle) {
  if (!axis.allFinite() || !std::isfinite(angle)) throw NumericError("non-finite axis-angle input");
  if (std::abs(axis.norm() - 1.0) > 1e-6) throw DomainError("rotation axis must be unit length");
  return rodrigues(axis, angle);
}

Mat3 rot_vector(const Vec3& r) {
  if (!r.allFinite()) throw NumericError("non-finite axis-angle vector");
  const double angle = r.norm();
  if (angle < kTaylorThreshold) {
    const Mat3 k = skew(r);
    return Mat3::Identity() + k + 0.5 * (k * k);
  }
  return rodrigues(r / angle, angle);
}

Mat3 so3_left_jacobian(const Vec3& r) {
  const double angle = r.norm();
  const Mat3 k = skew(r);
  double a;
  double b;
  if (angle < 1e-4) {
    const double a2 = angle * angle;
    a = 0.5 - a2 / 24.0;
    b = 1.0 / 6.0 - a2 / 120.0;
  } else {
    a = (1.0 - std::cos(angle)) / (angle * angle);
    b = (angle - std::sin(angle)) / (angle * angle * angle);
  }
  return Mat3::Identity() + a * k + b * (k * k);
}

PoseState PoseState::zero(int joint_count) {
  PoseState pose;
  pose.joint_angles = Eigen::VectorXd::Zero(std::max(joint_count - 1, 0));
  return pose;
}

FkFrame forward_kinematics(const PoseState& pose, const SkeletonGraph& graph) {
  const int count = graph.joint_count();
  if (pose.joint_angles.size() != count - 1) {
    throw ShapeError("pose has " + std::to_string(pose.joint_angles.size()) + " angles, skeleton '" +
                     graph.name + "' needs " + std::to_string(count - 1));
  }
  FkFrame frame;
  frame.positions.resize(count);
  frame.rotations.resize(count);
  frame.rotations[0] = rot_vector(pose.base_orientation);
  frame.positions[0] = pose.base_position;
  for (int j = 1; j < count; ++j) {
    const int parent = graph.parent_index[j];
    frame.positions[j] = frame.positions[parent] + frame.rotations[parent] * graph.link_vectors[j];
    frame.rotations[j] = frame.rotations[parent] * rodrigues(graph.axes[j], pose.joint_angles[j - 1]);
  }
  return frame;
}

std::vector<std::vector<Vec3>> forward_kinematics(std::span<const PoseState> poses,
                                                   const SkeletonGraph& graph) {
  std::vector<std::vector<Vec3>> positions;
  positions.reserve(poses.size());
  for (const auto& pose : poses) positions.push_back(forward_kinematics(pose, graph).positions);
  return positions;
}

PoseGradient fk_backward(const PoseState& pose, const SkeletonGraph& graph, const FkFrame& frame,
                         std::span<const Vec3> position_grads) {
  const int count = graph.joint_count();
  if (static_cast<int>(position_grads.size()) != count) throw ShapeError("gradient count mismatch");
  // Subtree sums of g_d and P_d x g_d, accumulated leaves-first.
  std::vector<Vec3> force(position_grads.begin(), position_grads.end());
  std::vector<Vec3> moment(count);
  for (int j = 0; j < count; ++j) moment[j] = frame.positions[j].cross(position_grads[j]);
  for (int j = count - 1; j >= 1; --j) {
    force[graph.parent_index[j]] += force[j];
    moment[graph.parent_index[j]] += moment[j];
  }
  PoseGradient grad = PoseState::zero(count);
  for (int j = 1; j < count; ++j) {
    const Vec3 world_axis = frame.rotations[j] * graph.axes[j];
    grad.joint_angles[j - 1] = world_axis.dot(moment[j] - frame.positions[j].cross(force[j]));
  }
  grad.base_position = force[0];
  const Vec3 torque = moment[0] - pose.base_position.cross(force[0]);
  grad.base_orientation = so3_left_jacobian(pose.base_orientation).transpose() * torque;
  return grad;
}

PoseState pose_from_clip(const MotionClip& clip, int t, int joint_count) {
  if (joint_count > clip.joints) throw ShapeError("clip has fewer joints than the skeleton");
  PoseState pose;
  for (int k = 0; k < 3; ++k) {
    pose.base_orientation[k] = clip.at(t, 0, lane::kBaseOrientation + k);
    pose.base_position[k] = clip.at(t, 0, lane::kBasePosition + k);
  }
  pose.joint_angles.resize(joint_count - 1);
  for (int j = 1; j < joint_count; ++j) pose.joint_angles[j - 1] = clip.at(t, j, lane::kAngle);
  return pose;
}

void write_pose(MotionClip& clip, int t, const PoseState& pose) {
  if (pose.joint_angles.size() + 1 > clip.joints) throw ShapeError("pose has more joints than the clip");
  for (int k = 0; k < 3; ++k) {
    clip.at(t, 0, lane::kBaseOrientation + k) = pose.base_orientation[k];
    clip.at(t, 0, lane::kBasePosition + k) = pose.base_position[k];
  }
  for (int j = 1; j <= pose.joint_angles.size(); ++j) clip.at(t, j, lane::kAngle) = pose.joint_angles[j - 1];
}

MotionClip with_fk_lanes(const MotionClip& clip, const SkeletonGraph& graph) {
  MotionClip out = clip;
  const int count = graph.joint_count();
  for (int t = 0; t < clip.frames; ++t) {
    if (!clip.frame_valid[t]) continue;
    const auto frame = forward_kinematics(pose_from_clip(clip, t, count), graph);
    for (int j = 0; j < count; ++j) out.set_position(t, j, frame.positions[j]);
  }
  refresh_velocities(out);
  return out;
}

MotionClip clip_from_poses(std::span<const PoseState> poses, const SkeletonGraph& graph, double fps,
                           const std::string& skeleton_id) {
  MotionClip clip = MotionClip::zeros(static_cast<int>(poses.size()), graph.joint_count(), fps,
                                      skeleton_id.empty() ? graph.name : skeleton_id);
  for (int t = 0; t < clip.frames; ++t) write_pose(clip, t, poses[t]);
  return with_fk_lanes(clip, graph);
}

double leg_length(const SkeletonGraph& graph) {
  for (const char* side : {"", "Left", "Right"}) {
    const int hip = graph.key_joint(std::string(side) + "Hip");
    const int ankle = graph.key_joint(std::string(side) + "Ankle");
    if (hip < 0 || ankle < 0) continue;
    double length = 0.0;
    int cursor = ankle;
    while (cursor != hip) {
      if (cursor <= 0) throw ConfigError("hip is not an ancestor of the ankle in '" + graph.name + "'");
      length += graph.link_vectors[cursor].norm();
      cursor = graph.parent_index[cursor];
    }
    if (!(length > 0.0)) throw ConfigError("leg of '" + graph.name + "' has zero length");
    return length;
  }
  throw ConfigError("skeleton '" + graph.name + "' lacks Hip/Ankle key joints for the leg length");
}

double scaling_factor(const SkeletonGraph& desired, const SkeletonGraph& reference) {
  return leg_length(desired) / leg_length(reference);
}

std::vector<std::vector<Vec3>> scaled_reference_positions(const MotionClip& ref, double alpha) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw DomainError("scaling factor must be positive");
  std::vector<std::vector<Vec3>> positions(ref.frames, std::vector<Vec3>(ref.joints, Vec3::Zero()));
  for (int t = 0; t < ref.frames; ++t) {
    for (int j = 0; j < ref.joints; ++j) {
      if (ref.valid(t, j)) positions[t][j] = alpha * ref.position(t, j);
    }
  }
  return positions;
}

}  // namespace gdream
