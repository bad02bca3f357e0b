#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gdream/skeleton.hpp"

namespace gdream {

/// Features per joint token.
inline constexpr int kLanes = 9;

/// Lane layout of a token. The base row holds [r0, p0, v0]; every other joint
/// holds [q, p, v, 0, 0].
namespace lane {
inline constexpr int kBaseOrientation = 0;
inline constexpr int kBasePosition = 3;
inline constexpr int kBaseVelocity = 6;
inline constexpr int kAngle = 0;
inline constexpr int kPosition = 1;
inline constexpr int kVelocity = 4;
inline constexpr int kPadBegin = 7;
}  // namespace lane

inline constexpr int kClipFormatVersion = 1;

/// Motion tensor of shape frames x joints x 9 with validity masks.
///
/// Padded frames and joints are all-zero and flagged invalid. The lanes 7 and
/// 8 of every non-base token are zero.
struct MotionClip {
  int frames = 0;
  int joints = 0;
  std::vector<double> data;
  std::vector<std::uint8_t> frame_valid;
  std::vector<std::uint8_t> joint_valid;
  double fps = 30.0;
  std::string skeleton_id;

  /// All-valid zero clip.
  static MotionClip zeros(int frames, int joints, double fps = 30.0, std::string skeleton_id = {});

  double& at(int t, int j, int lane) { return data[offset(t, j) + lane]; }
  double at(int t, int j, int lane) const { return data[offset(t, j) + lane]; }
  std::size_t offset(int t, int j) const {
    return (static_cast<std::size_t>(t) * joints + j) * kLanes;
  }

  bool valid(int t, int j) const { return frame_valid[t] && joint_valid[j]; }
  int valid_frame_count() const;
  int valid_joint_count() const;

  /// Global position stored in the token (base lanes 3..5, joint lanes 1..3).
  Vec3 position(int t, int j) const;
  void set_position(int t, int j, const Vec3& p);
  Vec3 velocity(int t, int j) const;
  void set_velocity(int t, int j, const Vec3& v);

  /// Rows are tokens in t * joints + j order, columns the 9 lanes.
  Eigen::MatrixXd as_matrix() const;
  void assign_matrix(const Eigen::MatrixXd& tokens);

  /// Copy padded with invalid zero frames/joints up to the given shape.
  MotionClip padded(int max_frames, int max_joints) const;

  /// Throws ShapeError / DomainError on violated invariants.
  void validate() const;

  bool operator==(const MotionClip&) const = default;
};

/// Lanes that carry data for token (t, j): all nine for the base, seven otherwise.
inline bool lane_active(int joint, int lane) { return joint == 0 || lane < lane::kPadBegin; }

/// Finite-difference velocities, v_k = (p_k - p_{k-1}) * fps and v_0 = v_1.
/// A single sample yields a zero velocity.
std::vector<Vec3> compute_velocities(std::span<const Vec3> positions, double fps);

/// Recomputes every velocity lane from the position lanes over valid frames.
void refresh_velocities(MotionClip& clip);

/// One frame of source motion: base pose, joint angles and optionally the
/// global joint positions (base first).
struct RawFrame {
  Vec3 base_orientation = Vec3::Zero();
  Vec3 base_position = Vec3::Zero();
  Eigen::VectorXd joint_angles;
  std::vector<Vec3> joint_positions;
};

struct RawMotion {
  double fps = 30.0;
  std::string skeleton_id;
  std::vector<RawFrame> frames;
};

/// Downsamples to `target_fps`, cuts non-overlapping windows of `clip_len`
/// frames and rebases each window so that its frame-0 base sits at x = y = 0
/// (height kept). Positions missing from the raw frames are computed by
/// forward kinematics on `graph`, which must then be given.
std::vector<MotionClip> preprocess_clip(const RawMotion& raw, double target_fps, int clip_len,
                                        const SkeletonGraph* graph = nullptr);

nlohmann::json clip_to_json(const MotionClip& clip);
MotionClip clip_from_json(const nlohmann::json& j);
void save_clip(const MotionClip& clip, const std::string& path);
MotionClip load_clip(const std::string& path);

RawMotion raw_motion_from_json(const nlohmann::json& j);
nlohmann::json raw_motion_to_json(const RawMotion& raw);

}  // namespace gdream
