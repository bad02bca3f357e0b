#pragma once

#include <vector>

#include "gdream/motion.hpp"
#include "gdream/skeleton.hpp"

namespace gdream {

/// Loss weights. Defaults are the training values: w0 = 100, w1 = 1,
/// w2 = 900, w3 = 1, lambda = 1e4.
struct GuidanceWeights {
  double similar = 100.0;
  double consistency = 1.0;
  double velocity = 900.0;
  double norm = 1.0;
  double lambda = 1e4;
  /// Smoothing of the non-squared norms in the regularizer.
  double norm_epsilon = 1e-8;

  void validate() const;
};

/// The four kinematic loss terms; f_kin^2 = total.
struct EnergyBreakdown {
  double similar = 0.0;
  double cst = 0.0;
  double vel = 0.0;
  double norm = 0.0;
  double total = 0.0;
  /// Set when the joint map had no active pair.
  bool empty_map = false;
};

/// What the energy compares: a predicted clip on the target skeleton against
/// a reference clip, paired through `map` (source = reference, target =
/// predicted) and scaled by `alpha`. Both clips must share a frame count.
struct GuidanceTarget {
  const SkeletonGraph& target_graph;
  const MotionClip& reference;
  const JointMap& map;
  double alpha = 1.0;
};

/// sum over active pairs and frames valid in both clips of
/// w0 * |FK(pred, i) - alpha * P(ref, j)|^2. FK reads the pose lanes of pred.
double loss_similar(const MotionClip& pred, const GuidanceTarget& target, double w0,
                    bool* empty_map = nullptr);

/// sum over joints and valid frames of w1 * |FK(pred, i) - P(pred, i)|^2,
/// where P(pred, i) reads the position lanes.
double loss_cst(const MotionClip& pred, const SkeletonGraph& target_graph, double w1);

/// sum over consecutive valid frames and active pairs of
/// w2 * |dFK(pred, i) - alpha * dP(ref, j)|^2 (frame differences, no dt).
double loss_vel(const MotionClip& pred, const GuidanceTarget& target, double w2);

/// w3 * (sum_i |q_i| + sum_k sum_i |dFK_k(pred, i)|), where q_i is the angle
/// trajectory of joint i over valid frames and |x| = sqrt(|x|^2 + eps^2).
double loss_norm(const MotionClip& pred, const SkeletonGraph& target_graph, double w3,
                 double eps = 1e-8);

EnergyBreakdown f_kin_energy(const MotionClip& pred, const GuidanceTarget& target,
                             const GuidanceWeights& weights);

/// Energy plus d(total)/d(pred.data) in the clip's flat layout. Only pose and
/// position lanes receive gradient.
EnergyBreakdown f_kin_energy_with_gradient(const MotionClip& pred, const GuidanceTarget& target,
                                           const GuidanceWeights& weights, std::vector<double>& gradient);

struct DirectOptimizeOptions {
  int steps = 2000;
  /// Initial trial step of the line search.
  double step_size = 1e-3;
};

struct DirectOptimizeReport {
  std::vector<double> energies;
  int iterations = 0;
  bool converged = false;
};

/// Learning-free baseline: gradient descent with a backtracking line search on
/// the pose trajectory of the target skeleton, starting from zero joint angles
/// with the base following the scaled reference. Position and velocity lanes
/// of the result are written from FK, so its L_cst is zero.
MotionClip direct_optimize(const GuidanceTarget& target, const GuidanceWeights& weights,
                           const DirectOptimizeOptions& options, DirectOptimizeReport* report = nullptr);

}  // namespace gdream
