#include "gdream/guidance.hpp"

#include <cmath>
#include <limits>

#include "gdream/error.hpp"
#include "gdream/kinematics.hpp"
#include "gdream/log.hpp"

namespace gdream {

namespace {

int position_lane(int joint) { return joint == 0 ? lane::kBasePosition : lane::kPosition; }

struct Inputs {
  const MotionClip& pred;
  const SkeletonGraph& graph;
  const MotionClip* ref = nullptr;
  const JointMap* map = nullptr;
  double alpha = 1.0;
};

void check_inputs(const Inputs& in) {
  const int count = in.graph.joint_count();
  if (in.pred.joints < count) {
    throw ShapeError("predicted clip has " + std::to_string(in.pred.joints) + " joints, skeleton '" +
                     in.graph.name + "' needs " + std::to_string(count));
  }
  if (!in.ref) return;
  if (in.ref->frames != in.pred.frames) {
    throw ShapeError("reference has " + std::to_string(in.ref->frames) + " frames, prediction has " +
                     std::to_string(in.pred.frames));
  }
  if (!(in.alpha > 0.0) || !std::isfinite(in.alpha)) throw DomainError("scaling factor must be positive");
  for (const auto& pair : in.map->pairs) {
    if (!pair.active()) continue;
    if (pair.source >= in.ref->joints || pair.target >= count) {
      throw ShapeError("joint pair '" + pair.semantic + "' is out of range");
    }
  }
}

// Accumulates the weighted terms. Terms with a zero weight are skipped; the
// reference terms need `in.ref` and `in.map`. When `gradient` is given it
// receives d(total)/d(pred.data).
EnergyBreakdown accumulate(const Inputs& in, const GuidanceWeights& w, std::vector<double>* gradient) {
  check_inputs(in);
  const MotionClip& pred = in.pred;
  const int count = in.graph.joint_count();
  const int frames = pred.frames;

  std::vector<PoseState> poses(frames);
  std::vector<FkFrame> fk(frames);
  for (int t = 0; t < frames; ++t) {
    if (!pred.frame_valid[t]) continue;
    poses[t] = pose_from_clip(pred, t, count);
    fk[t] = forward_kinematics(poses[t], in.graph);
  }
  std::vector<std::vector<Vec3>> dp;
  if (gradient) {
    gradient->assign(pred.data.size(), 0.0);
    dp.assign(frames, std::vector<Vec3>(count, Vec3::Zero()));
  }
  auto add_lane = [&](int t, int j, int lane0, const Vec3& g) {
    for (int k = 0; k < 3; ++k) (*gradient)[pred.offset(t, j) + lane0 + k] += g[k];
  };

  EnergyBreakdown e;
  std::vector<JointPair> pairs;
  if (in.map) {
    pairs = in.map->active_pairs();
    e.empty_map = pairs.empty();
  }
  const MotionClip* ref = in.ref;
  auto both_valid = [&](int t) { return pred.frame_valid[t] && ref->frame_valid[t]; };

  if (ref && w.similar != 0.0) {
    for (int t = 0; t < frames; ++t) {
      if (!both_valid(t)) continue;
      for (const auto& pair : pairs) {
        if (!ref->joint_valid[pair.source]) continue;
        const Vec3 diff = fk[t].positions[pair.target] - in.alpha * ref->position(t, pair.source);
        e.similar += w.similar * diff.squaredNorm();
        if (gradient) dp[t][pair.target] += 2.0 * w.similar * diff;
      }
    }
  }

  if (w.consistency != 0.0) {
    for (int t = 0; t < frames; ++t) {
      if (!pred.frame_valid[t]) continue;
      for (int j = 0; j < count; ++j) {
        const Vec3 diff = fk[t].positions[j] - pred.position(t, j);
        e.cst += w.consistency * diff.squaredNorm();
        if (gradient) {
          dp[t][j] += 2.0 * w.consistency * diff;
          add_lane(t, j, position_lane(j), -2.0 * w.consistency * diff);
        }
      }
    }
  }

  if (ref && w.velocity != 0.0) {
    for (int t = 1; t < frames; ++t) {
      if (!both_valid(t) || !both_valid(t - 1)) continue;
      for (const auto& pair : pairs) {
        if (!ref->joint_valid[pair.source]) continue;
        const Vec3 moved = fk[t].positions[pair.target] - fk[t - 1].positions[pair.target];
        const Vec3 wanted = in.alpha * (ref->position(t, pair.source) - ref->position(t - 1, pair.source));
        const Vec3 diff = moved - wanted;
        e.vel += w.velocity * diff.squaredNorm();
        if (gradient) {
          dp[t][pair.target] += 2.0 * w.velocity * diff;
          dp[t - 1][pair.target] -= 2.0 * w.velocity * diff;
        }
      }
    }
  }

  if (w.norm != 0.0) {
    const double eps2 = w.norm_epsilon * w.norm_epsilon;
    for (int j = 1; j < count; ++j) {
      double sum = 0.0;
      for (int t = 0; t < frames; ++t) {
        if (pred.frame_valid[t]) sum += pred.at(t, j, lane::kAngle) * pred.at(t, j, lane::kAngle);
      }
      const double n = std::sqrt(sum + eps2);
      e.norm += w.norm * n;
      if (!gradient) continue;
      for (int t = 0; t < frames; ++t) {
        if (pred.frame_valid[t]) (*gradient)[pred.offset(t, j) + lane::kAngle] += w.norm * pred.at(t, j, lane::kAngle) / n;
      }
    }
    for (int t = 1; t < frames; ++t) {
      if (!pred.frame_valid[t] || !pred.frame_valid[t - 1]) continue;
      for (int j = 0; j < count; ++j) {
        const Vec3 d = fk[t].positions[j] - fk[t - 1].positions[j];
        const double n = std::sqrt(d.squaredNorm() + eps2);
        e.norm += w.norm * n;
        if (gradient) {
          dp[t][j] += w.norm * d / n;
          dp[t - 1][j] -= w.norm * d / n;
        }
      }
    }
  }

  e.total = e.similar + e.cst + e.vel + e.norm;

  if (gradient) {
    for (int t = 0; t < frames; ++t) {
      if (!pred.frame_valid[t]) continue;
      const PoseGradient g = fk_backward(poses[t], in.graph, fk[t], dp[t]);
      add_lane(t, 0, lane::kBaseOrientation, g.base_orientation);
      add_lane(t, 0, lane::kBasePosition, g.base_position);
      for (int j = 1; j < count; ++j) (*gradient)[pred.offset(t, j) + lane::kAngle] += g.joint_angles[j - 1];
    }
  }
  return e;
}

GuidanceWeights only(double GuidanceWeights::*field, double value, double eps = 1e-8) {
  GuidanceWeights w;
  w.similar = w.consistency = w.velocity = w.norm = 0.0;
  w.*field = value;
  w.norm_epsilon = eps;
  return w;
}

void check_weight(double w, const char* name) {
  if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError(std::string("weight ") + name + " must be nonnegative");
}

}  // namespace

void GuidanceWeights::validate() const {
  check_weight(similar, "w0");
  check_weight(consistency, "w1");
  check_weight(velocity, "w2");
  check_weight(norm, "w3");
  check_weight(lambda, "lambda");
  if (!(norm_epsilon > 0.0)) throw ConfigError("norm epsilon must be positive");
}

double loss_similar(const MotionClip& pred, const GuidanceTarget& target, double w0, bool* empty_map) {
  check_weight(w0, "w0");
  const auto e = accumulate({pred, target.target_graph, &target.reference, &target.map, target.alpha},
                            only(&GuidanceWeights::similar, w0), nullptr);
  if (empty_map) *empty_map = e.empty_map;
  if (e.empty_map) log().warn("joint map has no active pair; L_similar is zero");
  return e.similar;
}

double loss_cst(const MotionClip& pred, const SkeletonGraph& target_graph, double w1) {
  check_weight(w1, "w1");
  return accumulate({pred, target_graph}, only(&GuidanceWeights::consistency, w1), nullptr).cst;
}

double loss_vel(const MotionClip& pred, const GuidanceTarget& target, double w2) {
  check_weight(w2, "w2");
  return accumulate({pred, target.target_graph, &target.reference, &target.map, target.alpha},
                    only(&GuidanceWeights::velocity, w2), nullptr)
      .vel;
}

double loss_norm(const MotionClip& pred, const SkeletonGraph& target_graph, double w3, double eps) {
  check_weight(w3, "w3");
  if (!(eps > 0.0)) throw ConfigError("norm epsilon must be positive");
  return accumulate({pred, target_graph}, only(&GuidanceWeights::norm, w3, eps), nullptr).norm;
}

EnergyBreakdown f_kin_energy(const MotionClip& pred, const GuidanceTarget& target, const GuidanceWeights& weights) {
  weights.validate();
  return accumulate({pred, target.target_graph, &target.reference, &target.map, target.alpha}, weights, nullptr);
}

EnergyBreakdown f_kin_energy_with_gradient(const MotionClip& pred, const GuidanceTarget& target,
                                           const GuidanceWeights& weights, std::vector<double>& gradient) {
  weights.validate();
  return accumulate({pred, target.target_graph, &target.reference, &target.map, target.alpha}, weights,
                    &gradient);
}

namespace {

// Pose variables of the valid frames, packed as [r0, p0, q] per frame.
class PoseVariables {
 public:
  PoseVariables(const MotionClip& layout, int joint_count) : layout_(layout), count_(joint_count) {
    for (int t = 0; t < layout.frames; ++t) {
      if (layout.frame_valid[t]) frames_.push_back(t);
    }
  }

  int per_frame() const { return 6 + count_ - 1; }
  Eigen::Index size() const { return static_cast<Eigen::Index>(frames_.size()) * per_frame(); }

  Eigen::VectorXd pack(const MotionClip& clip) const {
    Eigen::VectorXd x(size());
    for (std::size_t f = 0; f < frames_.size(); ++f) gather(clip.data, frames_[f], x.data() + f * per_frame());
    return x;
  }

  MotionClip unpack(const Eigen::VectorXd& x) const {
    MotionClip clip = layout_;
    for (std::size_t f = 0; f < frames_.size(); ++f) {
      const double* src = x.data() + f * per_frame();
      const int t = frames_[f];
      for (int k = 0; k < 6; ++k) clip.at(t, 0, k) = src[k];
      for (int j = 1; j < count_; ++j) clip.at(t, j, lane::kAngle) = src[6 + j - 1];
    }
    return clip;
  }

  Eigen::VectorXd pack_gradient(const std::vector<double>& grad) const {
    Eigen::VectorXd g(size());
    for (std::size_t f = 0; f < frames_.size(); ++f) gather(grad, frames_[f], g.data() + f * per_frame());
    return g;
  }

 private:
  void gather(const std::vector<double>& data, int t, double* dst) const {
    const std::size_t base = layout_.offset(t, 0);
    for (int k = 0; k < 6; ++k) dst[k] = data[base + k];
    for (int j = 1; j < count_; ++j) dst[6 + j - 1] = data[layout_.offset(t, j) + lane::kAngle];
  }

  MotionClip layout_;
  int count_;
  std::vector<int> frames_;
};

constexpr int kMaxBacktracks = 50;
constexpr double kArmijo = 1e-4;

}  // namespace

MotionClip direct_optimize(const GuidanceTarget& target, const GuidanceWeights& weights,
                           const DirectOptimizeOptions& options, DirectOptimizeReport* report) {
  weights.validate();
  if (options.steps < 0) throw ConfigError("steps must be nonnegative");
  if (!(options.step_size > 0.0)) throw ConfigError("step size must be positive");
  const SkeletonGraph& graph = target.target_graph;
  const MotionClip& ref = target.reference;
  const int count = graph.joint_count();
  if (!(target.alpha > 0.0) || !std::isfinite(target.alpha)) throw DomainError("scaling factor must be positive");

  MotionClip init = MotionClip::zeros(ref.frames, count, ref.fps, graph.name);
  init.frame_valid = ref.frame_valid;
  for (int t = 0; t < ref.frames; ++t) {
    if (!ref.frame_valid[t]) continue;
    PoseState pose = PoseState::zero(count);
    for (int k = 0; k < 3; ++k) pose.base_orientation[k] = ref.at(t, 0, lane::kBaseOrientation + k);
    pose.base_position = target.alpha * ref.position(t, 0);
    write_pose(init, t, pose);
  }

  const PoseVariables vars(init, count);
  std::vector<double> flat;
  auto evaluate = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    const MotionClip clip = with_fk_lanes(vars.unpack(x), graph);
    const double energy = f_kin_energy_with_gradient(clip, target, weights, flat).total;
    g = vars.pack_gradient(flat);
    return energy;
  };

  Eigen::VectorXd x = vars.pack(init);
  Eigen::VectorXd g;
  double energy = evaluate(x, g);
  if (!std::isfinite(energy)) throw OptimizationError("initial energy is not finite");
  DirectOptimizeReport local;
  DirectOptimizeReport& rep = report ? *report : local;
  rep = {};
  rep.energies.push_back(energy);

  double step = options.step_size;
  int rising = 0;
  Eigen::VectorXd x_next;
  Eigen::VectorXd g_next;
  for (int it = 0; it < options.steps; ++it) {
    const double g2 = g.squaredNorm();
    if (g2 == 0.0) {
      rep.converged = true;
      break;
    }
    bool accepted = false;
    double e_next = 0.0;
    for (int b = 0; b < kMaxBacktracks; ++b) {
      x_next = x - step * g;
      e_next = evaluate(x_next, g_next);
      if (std::isfinite(e_next) && e_next <= energy - kArmijo * step * g2) {
        accepted = true;
        break;
      }
      // Rounding-level changes near a minimum are not counted as rises.
      const double slack = 1e-10 * std::max(std::abs(energy), 1.0);
      rising = (!std::isfinite(e_next) || e_next > energy + slack) ? rising + 1 : 0;
      if (rising >= kMaxBacktracks) {
        throw OptimizationError("energy rose over " + std::to_string(rising) + " consecutive trial steps");
      }
      step *= 0.5;
    }
    if (!accepted) {
      rep.converged = true;
      break;
    }
    rising = 0;
    const Eigen::VectorXd dx = x_next - x;
    const Eigen::VectorXd dg = g_next - g;
    x.swap(x_next);
    g.swap(g_next);
    energy = e_next;
    rep.energies.push_back(energy);
    rep.iterations = it + 1;
    // Barzilai-Borwein trial step for the next line search.
    const double curvature = dx.dot(dg);
    step = curvature > 0.0 ? dx.squaredNorm() / curvature : 2.0 * step;
    step = std::clamp(step, 1e-12, 1e3);
  }
  log().debug("direct_optimize: {} iterations, energy {:.6g} -> {:.6g}", rep.iterations, rep.energies.front(),
              rep.energies.back());
  return with_fk_lanes(vars.unpack(x), graph);
}

}  // namespace gdream
