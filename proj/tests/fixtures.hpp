#pragma once

// Synthetic skeletons and motions shared by the test suites.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "gdream/diffusion.hpp"
#include "gdream/kinematics.hpp"
#include "gdream/motion.hpp"
#include "gdream/rng.hpp"
#include "gdream/skeleton.hpp"

namespace gdream::testing {

struct JointSpec {
  std::string name;
  int parent;
  Vec3 axis;
  Vec3 link;
};

inline SkeletonGraph make_graph(const std::string& name, const std::vector<JointSpec>& joints,
                                const std::map<std::string, int>& keys = {}) {
  SkeletonGraph g;
  g.name = name;
  g.joint_names.push_back("base");
  g.parent_index.push_back(-1);
  g.axes.push_back(Vec3::Zero());
  g.link_vectors.push_back(Vec3::Zero());
  for (const auto& j : joints) {
    g.joint_names.push_back(j.name);
    g.parent_index.push_back(j.parent);
    g.axes.push_back(j.axis.normalized());
    g.link_vectors.push_back(j.link);
  }
  g.relation = build_relation_matrix(g.parent_index);
  g.key_joints = keys;
  g.validate();
  return g;
}

/// Two-legged robot: base, then per side hip (pitch), knee, ankle, toe.
/// Joint count 9. Key joints Left/Right Hip, Knee, Ankle, Toe.
inline SkeletonGraph make_biped(const std::string& name, double thigh = 0.4, double calf = 0.4,
                                double foot = 0.1, double hip_width = 0.1) {
  std::vector<JointSpec> joints;
  std::map<std::string, int> keys;
  int index = 1;
  for (const std::string side : {"Left", "Right"}) {
    const double y = side == "Left" ? hip_width : -hip_width;
    joints.push_back({side + "_hip", 0, Vec3::UnitY(), Vec3(0, y, 0)});
    keys[side + "Hip"] = index;
    joints.push_back({side + "_knee", index, Vec3::UnitY(), Vec3(0, 0, -thigh)});
    keys[side + "Knee"] = index + 1;
    joints.push_back({side + "_ankle", index + 1, Vec3::UnitY(), Vec3(0, 0, -calf)});
    keys[side + "Ankle"] = index + 2;
    joints.push_back({side + "_toe", index + 2, Vec3(1, 0, 1), Vec3(foot, 0, -0.02)});
    keys[side + "Toe"] = index + 3;
    index += 4;
  }
  return make_graph(name, joints, keys);
}

/// Biped without feet, every link scaled by `scale`: base, then per side
/// hip, knee, ankle. Joint count 7.
inline SkeletonGraph make_leg_biped(const std::string& name, double scale = 1.0) {
  std::vector<JointSpec> joints;
  std::map<std::string, int> keys;
  int index = 1;
  for (const std::string side : {"Left", "Right"}) {
    const double y = side == "Left" ? 0.1 * scale : -0.1 * scale;
    joints.push_back({side + "_hip", 0, Vec3::UnitY(), Vec3(0, y, 0)});
    keys[side + "Hip"] = index;
    joints.push_back({side + "_knee", index, Vec3::UnitY(), Vec3(0, 0, -0.4 * scale)});
    keys[side + "Knee"] = index + 1;
    joints.push_back({side + "_ankle", index + 1, Vec3(1, 0, 1), Vec3(0.05 * scale, 0, -0.4 * scale)});
    keys[side + "Ankle"] = index + 2;
    index += 3;
  }
  return make_graph(name, joints, keys);
}

/// Biped legs plus two arms (shoulder, elbow, hand per side). Joint count 15.
inline SkeletonGraph make_humanoid(const std::string& name, double thigh = 0.4, double calf = 0.4,
                                   double upper_arm = 0.3, double forearm = 0.25) {
  auto legs = make_biped(name, thigh, calf);
  std::vector<JointSpec> joints;
  for (int j = 1; j < legs.joint_count(); ++j) {
    joints.push_back({legs.joint_names[j], legs.parent_index[j], legs.axes[j], legs.link_vectors[j]});
  }
  auto keys = legs.key_joints;
  int index = legs.joint_count();
  for (const std::string side : {"Left", "Right"}) {
    const double y = side == "Left" ? 0.2 : -0.2;
    joints.push_back({side + "_shoulder", 0, Vec3::UnitY(), Vec3(0, y, 0.5)});
    keys[side + "Shoulder"] = index;
    joints.push_back({side + "_elbow", index, Vec3(0, 1, 0.3), Vec3(0, 0, -upper_arm)});
    keys[side + "Elbow"] = index + 1;
    joints.push_back({side + "_hand", index + 1, Vec3::UnitX(), Vec3(0, 0, -forearm)});
    keys[side + "Hand"] = index + 2;
    index += 3;
  }
  return make_graph(name, joints, keys);
}

inline Vec3 random_unit(Rng& rng) {
  Vec3 v(rng.normal(), rng.normal(), rng.normal());
  while (v.norm() < 1e-3) v = Vec3(rng.normal(), rng.normal(), rng.normal());
  return v.normalized();
}

/// Random tree with `count` joints; parents precede children.
inline SkeletonGraph random_tree(Rng& rng, int count, const std::string& name = "random") {
  std::vector<JointSpec> joints;
  for (int j = 1; j < count; ++j) {
    const int parent = static_cast<int>(rng.index(static_cast<std::uint64_t>(j)));
    joints.push_back({"j" + std::to_string(j), parent, random_unit(rng),
                      Vec3(rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4), rng.uniform(-0.4, 0.4))});
  }
  return make_graph(name, joints);
}

/// Smooth gait-like pose sequence: sinusoidal joint angles, base drifting
/// forward at `speed` m/s with a constant height.
inline std::vector<PoseState> wave_poses(const SkeletonGraph& graph, int frames, double fps = 30.0,
                                         std::uint64_t seed = 1, double amplitude = 0.5,
                                         double speed = 0.5, double height = 0.9) {
  Rng rng(seed);
  const int n = graph.joint_count() - 1;
  Eigen::VectorXd phase(n), freq(n), offset(n);
  for (int k = 0; k < n; ++k) {
    phase[k] = rng.uniform(0.0, 2.0 * M_PI);
    freq[k] = rng.uniform(0.5, 1.5);
    offset[k] = rng.uniform(-0.2, 0.2);
  }
  std::vector<PoseState> poses;
  for (int t = 0; t < frames; ++t) {
    const double time = t / fps;
    PoseState pose = PoseState::zero(graph.joint_count());
    pose.base_position = Vec3(speed * time, 0.02 * std::sin(3.0 * time), height);
    pose.base_orientation = Vec3(0.05 * std::sin(2.0 * time), 0.0, 0.1 * time);
    for (int k = 0; k < n; ++k) {
      pose.joint_angles[k] = offset[k] + amplitude * std::sin(2.0 * M_PI * freq[k] * time + phase[k]);
    }
    poses.push_back(pose);
  }
  return poses;
}

inline MotionClip wave_clip(const SkeletonGraph& graph, int frames, std::uint64_t seed = 1,
                            double amplitude = 0.5) {
  return clip_from_poses(wave_poses(graph, frames, 30.0, seed, amplitude), graph, 30.0, graph.name);
}

inline PoseState random_pose(Rng& rng, int joint_count, double spread = 1.5) {
  PoseState pose = PoseState::zero(joint_count);
  pose.base_orientation = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)) * spread;
  pose.base_position = Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0, 2));
  for (int k = 0; k < joint_count - 1; ++k) pose.joint_angles[k] = rng.uniform(-spread, spread) * 2.0;
  return pose;
}

/// Random energy problem: two random trees, a random partial correspondence,
/// a smooth FK-consistent reference and a prediction whose pose and position
/// lanes are independent random values.
struct GuidanceProblem {
  SkeletonGraph source;
  SkeletonGraph target;
  JointMap map;
  MotionClip reference;
  MotionClip pred;
  double alpha = 1.0;
};

inline GuidanceProblem random_guidance_problem(Rng& rng, int frames = 4) {
  GuidanceProblem p;
  p.source = random_tree(rng, 4 + static_cast<int>(rng.index(5)), "src");
  p.target = random_tree(rng, 4 + static_cast<int>(rng.index(5)), "dst");
  p.map.source_joint_count = p.source.joint_count();
  p.map.target_joint_count = p.target.joint_count();
  const int shared = std::min(p.source.joint_count(), p.target.joint_count());
  for (int k = 0; k < shared; ++k) {
    if (rng.bernoulli(0.3)) continue;
    p.map.pairs.push_back({"k" + std::to_string(k), k, shared - 1 - k});
  }
  if (p.map.active_pairs().empty()) p.map.pairs.push_back({"k", 0, 0});
  std::vector<PoseState> poses;
  for (int t = 0; t < frames; ++t) poses.push_back(random_pose(rng, p.source.joint_count(), 0.5));
  p.reference = clip_from_poses(poses, p.source, 30.0);
  p.pred = MotionClip::zeros(frames, p.target.joint_count(), 30.0, p.target.name);
  for (int t = 0; t < frames; ++t) {
    write_pose(p.pred, t, random_pose(rng, p.target.joint_count(), 0.8));
    for (int j = 0; j < p.target.joint_count(); ++j) {
      p.pred.set_position(t, j, Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0, 2)));
    }
  }
  p.alpha = rng.uniform(0.5, 2.0);
  return p;
}

/// |a - b| relative to the larger magnitude, floored at 1e-6 of `scale` so
/// that entries far below the gradient's size are not judged on FD noise.
inline double relative_error(double a, double b, double scale) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-6 * std::max(scale, 1.0)});
  return std::abs(a - b) / denom;
}

/// |a - b| / max(|a|, |b|) over whole vectors (Euclidean norms).
inline double vector_relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    diff += (a[k] - b[k]) * (a[k] - b[k]);
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  const double denom = std::sqrt(std::max({na, nb, 1e-300}));
  return std::sqrt(diff) / denom;
}

/// Training pair on the given graphs with the automatic joint map.
inline TrainSample pair_sample(const SkeletonGraph& source, const SkeletonGraph& target, const MotionClip& reference,
                               const std::string& id = "pair") {
  MotionClip ref = reference;
  ref.skeleton_id = source.name;
  return {id, ref, source, target, build_joint_map(source, target), scaling_factor(target, source)};
}

}  // namespace gdream::testing
