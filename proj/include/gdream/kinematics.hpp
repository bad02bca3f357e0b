#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <span>
#include <vector>

#include "gdream/motion.hpp"
#include "gdream/skeleton.hpp"

namespace gdream {

using Mat3 = Eigen::Matrix3d;

Mat3 skew(const Vec3& v);

/// Rotation by `angle` about a unit `axis` (Rodrigues).
Mat3 rot_axis_angle(const Vec3& axis, double angle);

/// Rotation of an axis-angle vector; angle = |r|. Below |r| = 1e-8 the
/// second-order expansion I + [r] + [r]^2 / 2 is used.
Mat3 rot_vector(const Vec3& r);

/// Left Jacobian of the SO(3) exponential: rot_vector(r + d) ~
/// exp([J(r) d]) rot_vector(r).
Mat3 so3_left_jacobian(const Vec3& r);

/// Base pose plus one angle per non-base joint.
struct PoseState {
  Vec3 base_orientation = Vec3::Zero();
  Vec3 base_position = Vec3::Zero();
  Eigen::VectorXd joint_angles;

  static PoseState zero(int joint_count);
};

/// Same layout, holding derivatives.
using PoseGradient = PoseState;

/// Global joint frames for one pose.
struct FkFrame {
  std::vector<Vec3> positions;
  std::vector<Mat3> rotations;
};

/// Root-first forward kinematics: P_j = P_a + R_a e_j, R_j = R_a rot(v_j, q_j).
FkFrame forward_kinematics(const PoseState& pose, const SkeletonGraph& graph);

/// Positions for a pose sequence, indexed [frame][joint].
std::vector<std::vector<Vec3>> forward_kinematics(std::span<const PoseState> poses,
                                                   const SkeletonGraph& graph);

/// Reverse-mode pass: given dL/dP_j for every joint of one frame, returns
/// dL/d(pose). `frame` must be the forward result for `pose`.
PoseGradient fk_backward(const PoseState& pose, const SkeletonGraph& graph, const FkFrame& frame,
                         std::span<const Vec3> position_grads);

/// Reads the pose lanes of frame t. The clip must hold at least
/// `graph.joint_count()` joints.
PoseState pose_from_clip(const MotionClip& clip, int t, int joint_count);
void write_pose(MotionClip& clip, int t, const PoseState& pose);

/// Rewrites the position and velocity lanes of every valid frame from forward
/// kinematics of the pose lanes.
MotionClip with_fk_lanes(const MotionClip& clip, const SkeletonGraph& graph);

/// Builds an all-valid clip from poses, positions and velocities via FK.
MotionClip clip_from_poses(std::span<const PoseState> poses, const SkeletonGraph& graph, double fps,
                           const std::string& skeleton_id = {});

/// Sum of link lengths from Hip down to Ankle. Uses the unqualified semantic
/// names when present, otherwise the Left side, otherwise the Right side.
double leg_length(const SkeletonGraph& graph);

/// alpha = leg_length(desired) / leg_length(reference).
double scaling_factor(const SkeletonGraph& desired, const SkeletonGraph& reference);

/// Global positions of `ref` scaled by alpha about the origin, [frame][joint].
std::vector<std::vector<Vec3>> scaled_reference_positions(const MotionClip& ref, double alpha);

}  // namespace gdream
