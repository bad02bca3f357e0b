#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "gdream/checkpoint.hpp"
#include "gdream/diffusion.hpp"
#include "gdream/guidance.hpp"
#include "gdream/skeleton.hpp"

namespace gdream {

struct DatasetOptions {
  /// Augmented copies of every (motion, target) pair on top of the original.
  int augmented_copies = 0;
  AugmentationPolicy policy;
  /// Probability of dropping a non end-effector pair in augmented copies.
  double correspondence_drop = 0.0;

  void validate() const;
};

/// Every motion paired with every graph as target, including graphs with no
/// motion data. Motions name their skeleton through `skeleton_id`.
std::vector<TrainSample> assemble_dataset(const std::vector<MotionClip>& motions,
                                          const std::vector<SkeletonGraph>& graphs, const DatasetOptions& options,
                                          std::uint64_t seed);

/// Mean over valid frames and active pairs of ||FK(pred)_i - alpha P(ref)_j||^2,
/// in cm^2.
double evaluate_positional_mse(const MotionClip& pred, const SkeletonGraph& target_graph, const MotionClip& reference,
                               const JointMap& map, double alpha);

/// Normalization statistics of the training targets (references laid onto
/// the target grids) in `dataset`.
NormalizationStats dataset_stats(const std::vector<TrainSample>& dataset,
                                 double min_std = NormalizationStats::kDefaultMinStd);

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Global gradient-norm clip; 0 disables.
  double grad_clip = 0.0;
  /// Cosine decay from learning_rate to final_learning_rate over this many
  /// optimizer steps; 0 keeps the rate constant.
  std::int64_t decay_steps = 0;
  double final_learning_rate = 0.0;

  double rate_at(std::int64_t step) const;
};

/// One Adam update of every parameter from its accumulated gradient.
void adam_step(ParameterSet& params, AdamState& state, const AdamOptions& options);

/// One line of the metrics log.
struct MetricsRecord {
  std::int64_t step = 0;
  double total = 0.0;
  double reconstruction = 0.0;
  double guidance = 0.0;
  /// Positional MSE (cm^2) per target embodiment, when evaluated.
  std::map<std::string, double> eval_mse;
};

nlohmann::json to_json(const MetricsRecord& record);

struct TrainOptions {
  /// Steps to run on top of the checkpoint's step count.
  std::int64_t steps = 0;
  int batch_size = 16;
  AdamOptions adam;
  std::uint64_t seed = 0;
  /// Checkpoints `step_<n>.ckpt` are written here when non-empty.
  std::string checkpoint_dir;
  std::int64_t checkpoint_every = 10000;
  /// JSON lines, appended.
  std::string metrics_path;
  std::int64_t log_every = 100;
  /// Evaluation of positional MSE on `eval_set` every k steps; 0 disables.
  std::int64_t eval_every = 0;
  std::vector<TrainSample> eval_set;
  int eval_sample_steps = 10;
  /// Called with every metrics record.
  std::function<void(const MetricsRecord&)> on_record;
  /// Record every step instead of every log_every steps (report only).
  bool record_every_step = false;

  void validate() const;
};

struct TrainReport {
  std::vector<MetricsRecord> records;
};

/// Mini-batch Adam on the guided objective. Batch composition, noise and
/// dropout at step s derive from (seed, s), so resuming from a checkpoint
/// continues the same trajectory.
Checkpoint train(const std::vector<TrainSample>& dataset, Checkpoint checkpoint, const GuidanceWeights& weights,
                 const TrainOptions& options, TrainReport* report = nullptr);

/// Positional MSE per target embodiment of `eval_set`, sampling with `seed`.
std::map<std::string, double> evaluate_checkpoint(const Checkpoint& checkpoint, const std::vector<TrainSample>& eval_set,
                                                  int sample_steps, std::uint64_t seed);

struct AdaptInputs {
  std::vector<MotionClip> motions;
  /// Embodiments of the original training set, unchanged.
  std::vector<SkeletonGraph> graphs;
  /// Embodiments added as targets.
  std::vector<SkeletonGraph> new_graphs;
  DatasetOptions dataset;
  std::uint64_t dataset_seed = 0;
};

/// Continues training from `base` with the new graphs added as targets.
/// When `expected` is given it must equal the checkpoint's configuration.
Checkpoint adapt(const Checkpoint& base, const AdaptInputs& inputs, const GuidanceWeights& weights,
                 const TrainOptions& options, const DenoiserConfig* expected = nullptr,
                 TrainReport* report = nullptr);

}  // namespace gdream
