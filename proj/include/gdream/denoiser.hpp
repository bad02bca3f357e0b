#pragma once

#include <Eigen/Core>

#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "gdream/autograd.hpp"
#include "gdream/motion.hpp"
#include "gdream/skeleton.hpp"

namespace gdream {

class Rng;

/// Transformer hyperparameters. Defaults follow the training table: H = 240,
/// 6 heads, 4 layers, FFN 1024, dropout 0.1, T_w = 31, T = 60, J = 40.
struct DenoiserConfig {
  int latent = 240;
  int heads = 6;
  /// Heads of the multi-conditional cross attention, split equally among the
  /// conditions of each stack (3 in the denoiser, 2 in the reference encoder).
  int cross_heads = 6;
  int layers = 4;
  int ffn_dim = 1024;
  double dropout = 0.1;
  int temporal_window = 31;
  int max_frames = 60;
  int max_joints = 40;

  int head_dim() const { return latent / heads; }
  void validate() const;
  bool operator==(const DenoiserConfig&) const = default;
};

void to_json(nlohmann::json& j, const DenoiserConfig& cfg);
void from_json(const nlohmann::json& j, DenoiserConfig& cfg);

/// Named trainable tensors in a fixed (sorted) order.
class ParameterSet {
 public:
  void add(const std::string& name, ag::Matrix init);
  const ag::Var& at(const std::string& name) const;
  bool contains(const std::string& name) const { return vars_.count(name) != 0; }
  const std::map<std::string, ag::Var>& all() const { return vars_; }
  void zero_grad();
  std::size_t scalar_count() const;

 private:
  std::map<std::string, ag::Var> vars_;
};

/// Token rows are t * joints + j.
struct TokenLayout {
  int frames = 0;
  int joints = 0;
  std::vector<std::uint8_t> valid;

  static TokenLayout of(const MotionClip& clip);
  int rows() const { return frames * joints; }
  int row(int t, int j) const { return t * joints + j; }
};

/// Sinusoidal code: row p, column 2i -> sin(p / 10000^(2i/H)), 2i+1 -> cos.
ag::Matrix sinusoidal_encoding(const std::vector<double>& positions, int width);

/// Weights of one self-attention sublayer, looked up under `prefix`.
struct SelfAttentionWeights {
  ag::Var wq, bq, wk, bk, wv, bv, wo, bo;
  ag::Var relation_q, relation_k;  // spatial only

  static SelfAttentionWeights from(const ParameterSet& params, const std::string& prefix);
};

/// Self attention among the joints of each frame, with relation-coded bias
/// from `relation` (codes 0..3, joints x joints). Returns [rows x H].
ag::Var spatial_attention(const TokenLayout& layout, const ag::Var& x, const Eigen::MatrixXi& relation,
                          const SelfAttentionWeights& w, int heads, ag::AttentionTrace* trace = nullptr);

/// Self attention over the frames of each joint, restricted to
/// |t - t'| <= (window - 1) / 2.
ag::Var temporal_attention(const TokenLayout& layout, const ag::Var& x, int window, const SelfAttentionWeights& w,
                           int heads, ag::AttentionTrace* trace = nullptr);

/// One key/value sequence of the cross attention with its query groups.
struct CrossCondition {
  ag::Var tokens;
  std::shared_ptr<const std::vector<ag::AttentionGroup>> groups;
};

struct CrossAttentionTrace {
  std::vector<ag::AttentionTrace> attention;  // per condition
  std::vector<ag::Var> outputs;               // per condition, before W_O
};

/// Heads are split equally among the conditions; each head group has its own
/// projections (names `prefix.c<k>.{q,k,v}`); outputs are concatenated and
/// projected by `prefix.o`.
ag::Var multi_cond_cross_attention(const ag::Var& x, const std::vector<CrossCondition>& conditions,
                                   const ParameterSet& params, const std::string& prefix, int cross_heads,
                                   int head_dim, CrossAttentionTrace* trace = nullptr);

/// Everything the denoiser is conditioned on. The reference clip is in the
/// same (normalized) space as the noisy input.
struct ConditionSet {
  const MotionClip& reference;
  const SkeletonGraph& source_graph;
  const SkeletonGraph& target_graph;
  const JointMap& map;
};

struct ForwardOptions {
  /// Dropout is active only when a generator is given.
  Rng* dropout_rng = nullptr;
};

struct DenoiseTrace {
  std::vector<ag::AttentionTrace> spatial;
  std::vector<ag::AttentionTrace> temporal;
  std::vector<CrossAttentionTrace> cross;
};

class Denoiser {
 public:
  /// Random initialization: Xavier-uniform weights, zero biases, unit norms.
  Denoiser(const DenoiserConfig& config, std::uint64_t seed);
  /// Takes existing parameters (e.g. from a checkpoint); names must match.
  Denoiser(const DenoiserConfig& config, ParameterSet params);

  const DenoiserConfig& config() const { return config_; }
  const ParameterSet& params() const { return params_; }
  ParameterSet& params() { return params_; }

  /// Token embedding: separate base and joint encoders, positional code on
  /// t * max_joints + j and, when `step` >= 0, the timestep embedding.
  ag::Var tokenize(const MotionClip& clip, int step, const std::string& stack = "") const;

  /// Reference decoder stack; rows follow the reference clip's layout.
  ag::Var encode_reference(const MotionClip& reference, const SkeletonGraph& source_graph,
                           const ForwardOptions& options = {}, DenoiseTrace* trace = nullptr) const;

  /// Prediction of the clean clip, [rows x 9] in the input's space. Padded
  /// tokens and pad lanes are zero. `encoded` is encode_reference(...).
  ag::Var denoise(const MotionClip& noisy, int step, const ConditionSet& conditions, const ag::Var& encoded,
                  const ForwardOptions& options = {}, DenoiseTrace* trace = nullptr) const;

  /// Convenience: both stacks without tape or dropout.
  MotionClip predict(const MotionClip& noisy, int step, const ConditionSet& conditions) const;

 private:
  ag::Var graph_condition(const SkeletonGraph& graph, bool links, const std::string& stack) const;
  ag::Var run_layers(const std::string& stack, const TokenLayout& layout, ag::Var x, const Eigen::MatrixXi& relation,
                     const std::vector<CrossCondition>& conditions, const ForwardOptions& options,
                     DenoiseTrace* trace) const;
  void check_clip(const MotionClip& clip, const SkeletonGraph& graph, const char* what) const;

  DenoiserConfig config_;
  ParameterSet params_;
};

/// Query groups of the reference condition: target tokens of frame t attend
/// to reference tokens of frame t whose joints they correspond to.
std::shared_ptr<const std::vector<ag::AttentionGroup>> reference_groups(const TokenLayout& target,
                                                                        const TokenLayout& reference,
                                                                        const JointMap& map);

}  // namespace gdream
