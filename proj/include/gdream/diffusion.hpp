#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "gdream/autograd.hpp"
#include "gdream/denoiser.hpp"
#include "gdream/guidance.hpp"
#include "gdream/motion.hpp"
#include "gdream/skeleton.hpp"

namespace gdream {

class Rng;

/// One training pair: a reference motion on g^M and the desired skeleton g^X.
struct TrainSample {
  std::string id;
  MotionClip reference;
  SkeletonGraph source_graph;
  SkeletonGraph target_graph;
  JointMap map;
  double alpha = 1.0;
};

/// Per-lane z-normalization, kept separately for base tokens and for the
/// other joints. Pad lanes of non-base tokens stay at mean 0, std 1.
struct NormalizationStats {
  std::array<double, kLanes> base_mean{};
  std::array<double, kLanes> base_std{};
  std::array<double, kLanes> joint_mean{};
  std::array<double, kLanes> joint_std{};

  static NormalizationStats identity();
  /// Statistics over the valid tokens of `clips`. Stds are floored at
  /// `min_std` so that nearly constant lanes (base height, say) do not blow
  /// up other skeletons' values.
  static NormalizationStats compute(const std::vector<MotionClip>& clips, double min_std = kDefaultMinStd);
  static constexpr double kDefaultMinStd = 0.1;

  double mean(int joint, int lane) const { return joint == 0 ? base_mean[lane] : joint_mean[lane]; }
  double std(int joint, int lane) const { return joint == 0 ? base_std[lane] : joint_std[lane]; }

  /// Valid tokens only; padded entries stay zero.
  MotionClip normalize(const MotionClip& clip) const;
  MotionClip denormalize(const MotionClip& clip) const;

  bool operator==(const NormalizationStats&) const = default;
};

void to_json(nlohmann::json& j, const NormalizationStats& s);
void from_json(const nlohmann::json& j, NormalizationStats& s);

/// Geometric noise levels, sigmas[0] = sigma_max down to sigmas[N-1] = sigma_min.
struct NoiseSchedule {
  int steps = 1000;
  double sigma_min = 0.01;
  double sigma_max = 10.0;
  std::vector<double> sigmas;
  NormalizationStats stats = NormalizationStats::identity();

  /// Schedule index whose sigma is nearest in log space.
  int index_of(double sigma) const;

  bool operator==(const NoiseSchedule&) const = default;
};

void to_json(nlohmann::json& j, const NoiseSchedule& s);
void from_json(const nlohmann::json& j, NoiseSchedule& s);

NoiseSchedule build_schedule(int steps = 1000, double sigma_min = 0.01, double sigma_max = 10.0);

/// x + sigma * eps on valid tokens' active lanes; eps is standard normal and
/// fixed by `seed`.
MotionClip perturb(const MotionClip& x, double sigma, std::uint64_t seed);
MotionClip perturb(const MotionClip& x, double sigma, Rng& rng);

/// Reference laid onto the target grid: target joint j takes reference joint
/// j where both exist, with position and velocity lanes scaled by `alpha`.
/// Target joints without a valid reference joint are flagged invalid.
MotionClip relay_to_target(const MotionClip& reference, int target_joints, double alpha = 1.0);

/// Clean training clip of a sample in normalized space, on the target grid
/// with every target joint valid; entries without reference data are zero.
MotionClip training_target(const TrainSample& sample, const NormalizationStats& stats);

/// Per-entry weights of the reconstruction error: 1 on active lanes of tokens
/// valid in both the reference and the target grid, 0 elsewhere.
ag::Matrix reconstruction_mask(const MotionClip& reference, int target_joints);

/// Network input scale 1 / sqrt(sigma^2 + 1): unit variance at every noise
/// level for normalized data.
double input_scale(double sigma);

/// D_theta(x; sigma, C), the clean-clip prediction for a noisy clip at
/// schedule index `step`.
ag::Var apply_denoiser(const Denoiser& model, const MotionClip& noisy, const NoiseSchedule& schedule, int step,
                       const ConditionSet& conditions, const ag::Var& encoded, const ForwardOptions& options = {});

struct LossBreakdown {
  double total = 0.0;
  double reconstruction = 0.0;
  /// Batch mean of lambda * f_kin total.
  double guidance = 0.0;
  std::vector<EnergyBreakdown> energies;
  std::vector<int> steps;
  /// De-normalized predictions the guidance was evaluated on.
  std::vector<MotionClip> predictions;
};

struct TrainingLoss {
  ag::Var total;
  LossBreakdown breakdown;
};

/// Guided objective averaged over the batch: reconstruction MSE in normalized
/// space plus lambda * f_kin total on the de-normalized prediction. Noise
/// levels and noise come from `rng`; dropout is active when `dropout_rng` is
/// given.
TrainingLoss training_loss(const std::vector<const TrainSample*>& batch, const Denoiser& model,
                           const NoiseSchedule& schedule, const GuidanceWeights& weights, Rng& rng,
                           Rng* dropout_rng = nullptr);

struct SampleOptions {
  /// Number of denoiser evaluations; 0 uses every schedule level.
  int steps = 0;
  /// Rewrite position and velocity lanes from FK of the pose lanes.
  bool fk_lanes = true;
};

struct SampleTrace {
  std::vector<double> sigmas;
  std::vector<int> indices;
};

/// Deterministic Euler sampler over decreasing sigma from sigma_max * eps;
/// the last state is passed through the denoiser once more. The result is in
/// physical units on the target grid (reference frames x target joints).
MotionClip sample(const TrainSample& conditions, const Denoiser& model, const NoiseSchedule& schedule,
                  std::uint64_t seed, const SampleOptions& options = {}, SampleTrace* trace = nullptr);

}  // namespace gdream
