#include "gdream/motion.hpp"

#include <cmath>

#include "file_util.hpp"
#include "gdream/error.hpp"
#include "gdream/kinematics.hpp"

namespace gdream {

namespace {

Vec3 vec3_at(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw FormatError("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

std::vector<std::uint8_t> mask_from_json(const nlohmann::json& j, std::size_t expected,
                                         const char* field) {
  if (!j.is_array() || j.size() != expected) {
    throw FormatError(std::string("mask '") + field + "' has the wrong length");
  }
  std::vector<std::uint8_t> mask;
  mask.reserve(expected);
  for (const auto& v : j) mask.push_back(v.get<bool>() ? 1 : 0);
  return mask;
}

}  // namespace

MotionClip MotionClip::zeros(int frames, int joints, double fps, std::string skeleton_id) {
  if (frames < 0 || joints < 0) throw ShapeError("negative clip shape");
  MotionClip clip;
  clip.frames = frames;
  clip.joints = joints;
  clip.data.assign(static_cast<std::size_t>(frames) * joints * kLanes, 0.0);
  clip.frame_valid.assign(frames, 1);
  clip.joint_valid.assign(joints, 1);
  clip.fps = fps;
  clip.skeleton_id = std::move(skeleton_id);
  return clip;
}

int MotionClip::valid_frame_count() const {
  int count = 0;
  for (auto v : frame_valid) count += v ? 1 : 0;
  return count;
}

int MotionClip::valid_joint_count() const {
  int count = 0;
  for (auto v : joint_valid) count += v ? 1 : 0;
  return count;
}

Vec3 MotionClip::position(int t, int j) const {
  const int first = j == 0 ? lane::kBasePosition : lane::kPosition;
  return {at(t, j, first), at(t, j, first + 1), at(t, j, first + 2)};
}

void MotionClip::set_position(int t, int j, const Vec3& p) {
  const int first = j == 0 ? lane::kBasePosition : lane::kPosition;
  for (int k = 0; k < 3; ++k) at(t, j, first + k) = p[k];
}

Vec3 MotionClip::velocity(int t, int j) const {
  const int first = j == 0 ? lane::kBaseVelocity : lane::kVelocity;
  return {at(t, j, first), at(t, j, first + 1), at(t, j, first + 2)};
}

void MotionClip::set_velocity(int t, int j, const Vec3& v) {
  const int first = j == 0 ? lane::kBaseVelocity : lane::kVelocity;
  for (int k = 0; k < 3; ++k) at(t, j, first + k) = v[k];
}

Eigen::MatrixXd MotionClip::as_matrix() const {
  Eigen::MatrixXd tokens(frames * joints, kLanes);
  for (int row = 0; row < frames * joints; ++row) {
    for (int l = 0; l < kLanes; ++l) tokens(row, l) = data[static_cast<std::size_t>(row) * kLanes + l];
  }
  return tokens;
}

void MotionClip::assign_matrix(const Eigen::MatrixXd& tokens) {
  if (tokens.rows() != frames * joints || tokens.cols() != kLanes) {
    throw ShapeError("token matrix does not match the clip shape");
  }
  for (int row = 0; row < frames * joints; ++row) {
    for (int l = 0; l < kLanes; ++l) data[static_cast<std::size_t>(row) * kLanes + l] = tokens(row, l);
  }
}

MotionClip MotionClip::padded(int max_frames, int max_joints) const {
  if (max_frames < frames || max_joints < joints) throw ShapeError("padding cannot shrink a clip");
  MotionClip out = zeros(max_frames, max_joints, fps, skeleton_id);
  for (int t = 0; t < max_frames; ++t) out.frame_valid[t] = t < frames && frame_valid[t];
  for (int j = 0; j < max_joints; ++j) out.joint_valid[j] = j < joints && joint_valid[j];
  for (int t = 0; t < frames; ++t) {
    for (int j = 0; j < joints; ++j) {
      for (int l = 0; l < kLanes; ++l) out.at(t, j, l) = at(t, j, l);
    }
  }
  return out;
}

void MotionClip::validate() const {
  if (frames < 0 || joints < 0) throw ShapeError("negative clip shape");
  if (data.size() != static_cast<std::size_t>(frames) * joints * kLanes ||
      frame_valid.size() != static_cast<std::size_t>(frames) ||
      joint_valid.size() != static_cast<std::size_t>(joints)) {
    throw ShapeError("clip buffers do not match its shape");
  }
  if (!(fps > 0.0)) throw DomainError("clip frame rate must be positive");
  for (int t = 0; t < frames; ++t) {
    for (int j = 0; j < joints; ++j) {
      for (int l = 0; l < kLanes; ++l) {
        const double v = at(t, j, l);
        if (!std::isfinite(v)) throw DomainError("non-finite clip entry");
        if ((!valid(t, j) || !lane_active(j, l)) && v != 0.0) {
          throw DomainError("padded clip entries must be zero");
        }
      }
    }
  }
}

std::vector<Vec3> compute_velocities(std::span<const Vec3> positions, double fps) {
  std::vector<Vec3> velocities(positions.size(), Vec3::Zero());
  if (positions.size() < 2) return velocities;
  for (std::size_t k = 1; k < positions.size(); ++k) {
    velocities[k] = (positions[k] - positions[k - 1]) * fps;
  }
  velocities[0] = velocities[1];
  return velocities;
}

void refresh_velocities(MotionClip& clip) {
  std::vector<int> frames;
  for (int t = 0; t < clip.frames; ++t) {
    if (clip.frame_valid[t]) frames.push_back(t);
  }
  for (int j = 0; j < clip.joints; ++j) {
    if (!clip.joint_valid[j]) continue;
    std::vector<Vec3> track;
    for (int t : frames) track.push_back(clip.position(t, j));
    const auto velocities = compute_velocities(track, clip.fps);
    for (std::size_t k = 0; k < frames.size(); ++k) clip.set_velocity(frames[k], j, velocities[k]);
  }
}

std::vector<MotionClip> preprocess_clip(const RawMotion& raw, double target_fps, int clip_len,
                                        const SkeletonGraph* graph) {
  if (!(raw.fps > 0.0) || !(target_fps > 0.0) || target_fps > raw.fps) {
    throw ConfigError("frame rates must be positive with target <= source");
  }
  if (clip_len < 1) throw ConfigError("clip length must be positive");
  std::vector<const RawFrame*> sampled;
  const double ratio = raw.fps / target_fps;
  for (std::size_t k = 0;; ++k) {
    const auto index = static_cast<std::size_t>(std::llround(static_cast<double>(k) * ratio));
    if (index >= raw.frames.size()) break;
    sampled.push_back(&raw.frames[index]);
  }

  std::vector<MotionClip> clips;
  if (sampled.empty()) return clips;
  const int joints = static_cast<int>(sampled.front()->joint_angles.size()) + 1;
  if (graph && graph->joint_count() != joints) throw ShapeError("raw motion does not match the skeleton");
  for (std::size_t start = 0; start + clip_len <= sampled.size(); start += clip_len) {
    const Vec3 origin = sampled[start]->base_position;
    const Vec3 offset(-origin.x(), -origin.y(), 0.0);
    MotionClip clip = MotionClip::zeros(clip_len, joints, target_fps, raw.skeleton_id);
    for (int t = 0; t < clip_len; ++t) {
      const RawFrame& frame = *sampled[start + t];
      if (frame.joint_angles.size() != joints - 1) throw ShapeError("raw frames disagree on joint count");
      PoseState pose;
      pose.base_orientation = frame.base_orientation;
      pose.base_position = frame.base_position + offset;
      pose.joint_angles = frame.joint_angles;
      write_pose(clip, t, pose);
      if (!frame.joint_positions.empty()) {
        if (static_cast<int>(frame.joint_positions.size()) != joints) {
          throw ShapeError("raw joint positions disagree with the joint count");
        }
        for (int j = 0; j < joints; ++j) clip.set_position(t, j, frame.joint_positions[j] + offset);
      } else {
        if (!graph) throw ConfigError("raw motion lacks positions and no skeleton was given");
        const auto fk = forward_kinematics(pose, *graph);
        for (int j = 0; j < joints; ++j) clip.set_position(t, j, fk.positions[j]);
      }
    }
    refresh_velocities(clip);
    clips.push_back(std::move(clip));
  }
  return clips;
}

nlohmann::json clip_to_json(const MotionClip& clip) {
  nlohmann::json j;
  j["version"] = kClipFormatVersion;
  j["T"] = clip.frames;
  j["J"] = clip.joints;
  j["fps"] = clip.fps;
  j["skeleton_id"] = clip.skeleton_id;
  j["data"] = clip.data;
  auto& frames = j["frame_valid"] = nlohmann::json::array();
  for (auto v : clip.frame_valid) frames.push_back(v != 0);
  auto& joints = j["joint_valid"] = nlohmann::json::array();
  for (auto v : clip.joint_valid) joints.push_back(v != 0);
  return j;
}

MotionClip clip_from_json(const nlohmann::json& j) {
  MotionClip clip;
  try {
    const int version = j.at("version").get<int>();
    if (version != kClipFormatVersion) {
      throw FormatError("clip format version " + std::to_string(version) + " is not supported");
    }
    clip.frames = j.at("T").get<int>();
    clip.joints = j.at("J").get<int>();
    if (clip.frames < 0 || clip.joints < 0) throw FormatError("negative clip shape");
    clip.fps = j.at("fps").get<double>();
    clip.skeleton_id = j.at("skeleton_id").get<std::string>();
    clip.data = j.at("data").get<std::vector<double>>();
    if (clip.data.size() != static_cast<std::size_t>(clip.frames) * clip.joints * kLanes) {
      throw FormatError("clip data length does not match T x J x 9");
    }
    clip.frame_valid = mask_from_json(j.at("frame_valid"), clip.frames, "frame_valid");
    clip.joint_valid = mask_from_json(j.at("joint_valid"), clip.joints, "joint_valid");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed clip: ") + e.what());
  }
  try {
    clip.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("invalid clip: ") + e.what());
  }
  return clip;
}

void save_clip(const MotionClip& clip, const std::string& path) {
  detail::write_text_file(path, clip_to_json(clip).dump() + "\n");
}

MotionClip load_clip(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_text_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("'" + path + "': " + e.what());
  }
  return clip_from_json(j);
}

RawMotion raw_motion_from_json(const nlohmann::json& j) {
  RawMotion raw;
  try {
    raw.fps = j.at("fps").get<double>();
    raw.skeleton_id = j.value("skeleton_id", std::string());
    for (const auto& f : j.at("frames")) {
      RawFrame frame;
      frame.base_orientation = vec3_at(f.at("base_orientation"));
      frame.base_position = vec3_at(f.at("base_position"));
      const auto angles = f.at("joint_angles").get<std::vector<double>>();
      frame.joint_angles = Eigen::Map<const Eigen::VectorXd>(angles.data(), static_cast<Eigen::Index>(angles.size()));
      if (f.contains("joint_positions")) {
        for (const auto& p : f["joint_positions"]) frame.joint_positions.push_back(vec3_at(p));
      }
      raw.frames.push_back(std::move(frame));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed raw motion: ") + e.what());
  }
  return raw;
}

nlohmann::json raw_motion_to_json(const RawMotion& raw) {
  nlohmann::json j;
  j["fps"] = raw.fps;
  j["skeleton_id"] = raw.skeleton_id;
  auto& frames = j["frames"] = nlohmann::json::array();
  for (const auto& frame : raw.frames) {
    nlohmann::json f;
    f["base_orientation"] = {frame.base_orientation.x(), frame.base_orientation.y(), frame.base_orientation.z()};
    f["base_position"] = {frame.base_position.x(), frame.base_position.y(), frame.base_position.z()};
    f["joint_angles"] = std::vector<double>(frame.joint_angles.data(),
                                            frame.joint_angles.data() + frame.joint_angles.size());
    if (!frame.joint_positions.empty()) {
      auto& positions = f["joint_positions"] = nlohmann::json::array();
      for (const auto& p : frame.joint_positions) positions.push_back({p.x(), p.y(), p.z()});
    }
    frames.push_back(std::move(f));
  }
  return j;
}

}  // namespace gdream
