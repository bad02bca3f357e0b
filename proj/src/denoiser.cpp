#include "gdream/denoiser.hpp"

#include <cmath>

#include "gdream/error.hpp"
#include "gdream/rng.hpp"

namespace gdream {

using ag::Matrix;
using ag::Var;

namespace {

constexpr int kDenoiserConditions = 3;
constexpr int kReferenceConditions = 2;
const std::string kRefStack = "ref.";

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

int conditions_of(const std::string& stack) {
  return stack.empty() ? kDenoiserConditions : kReferenceConditions;
}

// Full parameter list in creation order: (name, rows, cols, kind).
enum class Init { Xavier, Zero, One };
struct Spec {
  std::string name;
  int rows;
  int cols;
  Init init;
};

std::vector<Spec> parameter_specs(const DenoiserConfig& c) {
  const int h = c.latent;
  const int dh = c.head_dim();
  std::vector<Spec> specs;
  auto linear = [&](const std::string& name, int in, int out) {
    specs.push_back({name + ".w", in, out, Init::Xavier});
    specs.push_back({name + ".b", 1, out, Init::Zero});
  };
  auto norm = [&](const std::string& name) {
    specs.push_back({name + ".g", 1, h, Init::One});
    specs.push_back({name + ".b", 1, h, Init::Zero});
  };
  for (const std::string& stack : {std::string(), kRefStack}) {
    linear(stack + "enc.base", kLanes, h);
    linear(stack + "enc.joint", kLanes, h);
    linear(stack + "cond.axis", 3, h);
    linear(stack + "cond.link", 3, h);
    const int per_condition = c.cross_heads / conditions_of(stack);
    for (int l = 0; l < c.layers; ++l) {
      const std::string p = stack + "layer" + std::to_string(l) + ".";
      norm(p + "spatial.norm");
      for (const char* m : {"q", "k", "v", "o"}) linear(p + "spatial." + m, h, h);
      specs.push_back({p + "spatial.rel_q", kRelationCodes, h, Init::Xavier});
      specs.push_back({p + "spatial.rel_k", kRelationCodes, h, Init::Xavier});
      norm(p + "temporal.norm");
      for (const char* m : {"q", "k", "v", "o"}) linear(p + "temporal." + m, h, h);
      norm(p + "cross.norm");
      for (int k = 0; k < conditions_of(stack); ++k) {
        for (const char* m : {"q", "k", "v"}) linear(p + "cross.c" + std::to_string(k) + "." + m, h, per_condition * dh);
      }
      linear(p + "cross.o", c.cross_heads * dh, h);
      norm(p + "ffn.norm");
      linear(p + "ffn.1", h, c.ffn_dim);
      linear(p + "ffn.2", c.ffn_dim, h);
    }
    norm(stack + "final.norm");
  }
  linear("time.1", h, h);
  linear("time.2", h, h);
  linear("out", h, kLanes);
  return specs;
}

Var lin(const ParameterSet& p, const std::string& name, const Var& x) {
  return ag::linear(x, p.at(name + ".w"), p.at(name + ".b"));
}

Var norm(const ParameterSet& p, const std::string& name, const Var& x) {
  return ag::layer_norm(x, p.at(name + ".g"), p.at(name + ".b"));
}

Var drop(const Var& x, double rate, const ForwardOptions& options) {
  return options.dropout_rng ? ag::dropout(x, rate, *options.dropout_rng) : x;
}

Var attend(const Var& x, const SelfAttentionWeights& w, int heads,
           std::shared_ptr<const std::vector<ag::AttentionGroup>> groups, bool relational,
           ag::AttentionTrace* trace) {
  ag::AttentionInputs in;
  in.q = ag::linear(x, w.wq, w.bq);
  in.k = ag::linear(x, w.wk, w.bk);
  in.v = ag::linear(x, w.wv, w.bv);
  in.heads = heads;
  if (relational) {
    in.relation_q = w.relation_q;
    in.relation_k = w.relation_k;
  }
  return ag::linear(ag::grouped_attention(in, std::move(groups), trace), w.wo, w.bo);
}

std::shared_ptr<const std::vector<ag::AttentionGroup>> all_to_all(const TokenLayout& layout, int keys) {
  auto groups = std::make_shared<std::vector<ag::AttentionGroup>>(1);
  auto& g = groups->front();
  for (int r = 0; r < layout.rows(); ++r) {
    if (layout.valid[r]) g.queries.push_back(r);
  }
  for (int k = 0; k < keys; ++k) g.keys.push_back(k);
  if (g.queries.empty() || g.keys.empty()) groups->clear();
  return groups;
}

}  // namespace

void DenoiserConfig::validate() const {
  require(latent > 0 && heads > 0 && latent % heads == 0, "latent size must be a positive multiple of heads");
  require(cross_heads > 0 && cross_heads % kDenoiserConditions == 0 && cross_heads % kReferenceConditions == 0,
          "cross_heads must split equally over 3 and 2 conditions");
  require(layers > 0, "layers must be positive");
  require(ffn_dim > 0, "ffn_dim must be positive");
  require(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
  require(temporal_window > 0 && temporal_window % 2 == 1, "temporal window must be a positive odd number");
  require(max_frames > 0 && max_joints > 0, "frame and joint maxima must be positive");
}

void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = {{"latent", c.latent},   {"heads", c.heads},     {"cross_heads", c.cross_heads},
       {"layers", c.layers},   {"ffn_dim", c.ffn_dim}, {"dropout", c.dropout},
       {"temporal_window", c.temporal_window}, {"max_frames", c.max_frames}, {"max_joints", c.max_joints}};
}

void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  DenoiserConfig d;
  c.latent = j.value("latent", d.latent);
  c.heads = j.value("heads", d.heads);
  c.cross_heads = j.value("cross_heads", d.cross_heads);
  c.layers = j.value("layers", d.layers);
  c.ffn_dim = j.value("ffn_dim", d.ffn_dim);
  c.dropout = j.value("dropout", d.dropout);
  c.temporal_window = j.value("temporal_window", d.temporal_window);
  c.max_frames = j.value("max_frames", d.max_frames);
  c.max_joints = j.value("max_joints", d.max_joints);
}

void ParameterSet::add(const std::string& name, Matrix init) {
  if (!vars_.emplace(name, ag::parameter(std::move(init))).second) throw ConfigError("duplicate parameter " + name);
}

const Var& ParameterSet::at(const std::string& name) const {
  const auto it = vars_.find(name);
  if (it == vars_.end()) throw ConfigError("unknown parameter " + name);
  return it->second;
}

void ParameterSet::zero_grad() {
  for (auto& [name, var] : vars_) var.node()->grad.resize(0, 0);
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [name, var] : vars_) n += static_cast<std::size_t>(var.value().size());
  return n;
}

TokenLayout TokenLayout::of(const MotionClip& clip) {
  TokenLayout layout{clip.frames, clip.joints, std::vector<std::uint8_t>(clip.frames * clip.joints)};
  for (int t = 0; t < clip.frames; ++t) {
    for (int j = 0; j < clip.joints; ++j) layout.valid[layout.row(t, j)] = clip.valid(t, j) ? 1 : 0;
  }
  return layout;
}

Matrix sinusoidal_encoding(const std::vector<double>& positions, int width) {
  Matrix out(static_cast<Eigen::Index>(positions.size()), width);
  for (std::size_t r = 0; r < positions.size(); ++r) {
    for (int c = 0; c < width; ++c) {
      const int pair = c / 2;
      const double freq = std::pow(10000.0, -2.0 * pair / width);
      out(static_cast<Eigen::Index>(r), c) = c % 2 == 0 ? std::sin(positions[r] * freq) : std::cos(positions[r] * freq);
    }
  }
  return out;
}

SelfAttentionWeights SelfAttentionWeights::from(const ParameterSet& p, const std::string& prefix) {
  SelfAttentionWeights w;
  w.wq = p.at(prefix + ".q.w");
  w.bq = p.at(prefix + ".q.b");
  w.wk = p.at(prefix + ".k.w");
  w.bk = p.at(prefix + ".k.b");
  w.wv = p.at(prefix + ".v.w");
  w.bv = p.at(prefix + ".v.b");
  w.wo = p.at(prefix + ".o.w");
  w.bo = p.at(prefix + ".o.b");
  if (p.contains(prefix + ".rel_q")) {
    w.relation_q = p.at(prefix + ".rel_q");
    w.relation_k = p.at(prefix + ".rel_k");
  }
  return w;
}

Var spatial_attention(const TokenLayout& layout, const Var& x, const Eigen::MatrixXi& relation,
                      const SelfAttentionWeights& w, int heads, ag::AttentionTrace* trace) {
  auto groups = std::make_shared<std::vector<ag::AttentionGroup>>();
  for (int t = 0; t < layout.frames; ++t) {
    ag::AttentionGroup g;
    for (int j = 0; j < layout.joints; ++j) {
      if (layout.valid[layout.row(t, j)]) g.queries.push_back(layout.row(t, j));
    }
    if (g.queries.empty()) continue;
    g.keys = g.queries;
    for (int a : g.queries) {
      for (int b : g.keys) {
        const int ja = a % layout.joints;
        const int jb = b % layout.joints;
        if (ja >= relation.rows() || jb >= relation.cols()) throw ShapeError("relation matrix smaller than the joints");
        const int code = relation(ja, jb);
        if (code < 0 || code >= kRelationCodes) throw DomainError("relation code " + std::to_string(code) + " out of range");
        g.codes.push_back(static_cast<std::uint8_t>(code));
      }
    }
    groups->push_back(std::move(g));
  }
  return attend(x, w, heads, std::move(groups), true, trace);
}

Var temporal_attention(const TokenLayout& layout, const Var& x, int window, const SelfAttentionWeights& w, int heads,
                       ag::AttentionTrace* trace) {
  if (window <= 0 || window % 2 == 0) throw ConfigError("temporal window must be a positive odd number");
  const int half = (window - 1) / 2;
  auto groups = std::make_shared<std::vector<ag::AttentionGroup>>();
  for (int j = 0; j < layout.joints; ++j) {
    ag::AttentionGroup g;
    std::vector<int> frames;
    for (int t = 0; t < layout.frames; ++t) {
      if (!layout.valid[layout.row(t, j)]) continue;
      g.queries.push_back(layout.row(t, j));
      frames.push_back(t);
    }
    if (g.queries.empty()) continue;
    g.keys = g.queries;
    for (int a : frames) {
      for (int b : frames) g.allowed.push_back(std::abs(a - b) <= half ? 1 : 0);
    }
    groups->push_back(std::move(g));
  }
  return attend(x, w, heads, std::move(groups), false, trace);
}

Var multi_cond_cross_attention(const Var& x, const std::vector<CrossCondition>& conditions, const ParameterSet& p,
                               const std::string& prefix, int cross_heads, int head_dim, CrossAttentionTrace* trace) {
  const int n = static_cast<int>(conditions.size());
  if (n == 0 || cross_heads % n != 0) {
    throw ConfigError(std::to_string(cross_heads) + " heads cannot be split over " + std::to_string(n) + " conditions");
  }
  const int per = cross_heads / n;
  std::vector<Var> parts;
  for (int k = 0; k < n; ++k) {
    const std::string c = prefix + ".c" + std::to_string(k);
    ag::AttentionInputs in;
    in.q = lin(p, c + ".q", x);
    in.k = lin(p, c + ".k", conditions[k].tokens);
    in.v = lin(p, c + ".v", conditions[k].tokens);
    in.heads = per;
    if (in.q.cols() != per * head_dim) throw ConfigError("cross attention projection width mismatch");
    ag::AttentionTrace* block_trace = nullptr;
    if (trace) {
      trace->attention.emplace_back();
      block_trace = &trace->attention.back();
    }
    parts.push_back(ag::grouped_attention(in, conditions[k].groups, block_trace));
    if (trace) trace->outputs.push_back(parts.back());
  }
  return lin(p, prefix + ".o", ag::concat_cols(parts));
}

std::shared_ptr<const std::vector<ag::AttentionGroup>> reference_groups(const TokenLayout& target,
                                                                        const TokenLayout& reference,
                                                                        const JointMap& map) {
  if (target.frames != reference.frames) {
    throw ShapeError("reference has " + std::to_string(reference.frames) + " frames, target has " +
                     std::to_string(target.frames));
  }
  // corresponds[i][j]: target joint i may read reference joint j.
  std::vector<std::vector<std::uint8_t>> corresponds(target.joints, std::vector<std::uint8_t>(reference.joints, 0));
  for (const auto& pair : map.active_pairs()) {
    if (pair.target < target.joints && pair.source < reference.joints) corresponds[pair.target][pair.source] = 1;
  }
  auto groups = std::make_shared<std::vector<ag::AttentionGroup>>();
  for (int t = 0; t < target.frames; ++t) {
    ag::AttentionGroup g;
    for (int i = 0; i < target.joints; ++i) {
      if (target.valid[target.row(t, i)]) g.queries.push_back(target.row(t, i));
    }
    for (int j = 0; j < reference.joints; ++j) {
      if (reference.valid[reference.row(t, j)]) g.keys.push_back(reference.row(t, j));
    }
    if (g.queries.empty() || g.keys.empty()) continue;
    for (int q : g.queries) {
      for (int k : g.keys) g.allowed.push_back(corresponds[q % target.joints][k % reference.joints]);
    }
    groups->push_back(std::move(g));
  }
  return groups;
}

Denoiser::Denoiser(const DenoiserConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  for (const auto& s : parameter_specs(config_)) {
    Matrix m(s.rows, s.cols);
    switch (s.init) {
      case Init::Zero:
        m.setZero();
        break;
      case Init::One:
        m.setOnes();
        break;
      case Init::Xavier: {
        const double a = std::sqrt(6.0 / (s.rows + s.cols));
        for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = rng.uniform(-a, a);
        break;
      }
    }
    params_.add(s.name, std::move(m));
  }
}

Denoiser::Denoiser(const DenoiserConfig& config, ParameterSet params) : config_(config), params_(std::move(params)) {
  config_.validate();
  const auto specs = parameter_specs(config_);
  if (specs.size() != params_.all().size()) throw ConfigError("parameter set does not match the configuration");
  for (const auto& s : specs) {
    if (!params_.contains(s.name)) throw ConfigError("missing parameter " + s.name);
    const Var& v = params_.at(s.name);
    if (v.rows() != s.rows || v.cols() != s.cols) throw ConfigError("parameter " + s.name + " has the wrong shape");
  }
}

void Denoiser::check_clip(const MotionClip& clip, const SkeletonGraph& graph, const char* what) const {
  if (clip.frames > config_.max_frames || clip.joints > config_.max_joints) {
    throw ShapeError(std::string(what) + " clip " + std::to_string(clip.frames) + "x" + std::to_string(clip.joints) +
                     " exceeds the model maxima " + std::to_string(config_.max_frames) + "x" +
                     std::to_string(config_.max_joints));
  }
  if (clip.joints < graph.joint_count()) throw ShapeError(std::string(what) + " clip has fewer joints than its skeleton");
  for (int j = graph.joint_count(); j < clip.joints; ++j) {
    if (clip.joint_valid[j]) throw ShapeError(std::string(what) + " clip has valid joints beyond its skeleton");
  }
}

Var Denoiser::tokenize(const MotionClip& clip, int step, const std::string& stack) const {
  if (clip.frames > config_.max_frames || clip.joints > config_.max_joints) {
    throw ShapeError("clip exceeds the model's frame or joint maximum");
  }
  const TokenLayout layout = TokenLayout::of(clip);
  const int h = config_.latent;
  const Eigen::MatrixXd raw = clip.as_matrix();
  const Var x = ag::constant(Matrix(raw));
  Matrix base_mask = Matrix::Zero(layout.rows(), h);
  Matrix joint_mask = Matrix::Zero(layout.rows(), h);
  std::vector<double> positions(layout.rows());
  for (int t = 0; t < layout.frames; ++t) {
    for (int j = 0; j < layout.joints; ++j) {
      const int r = layout.row(t, j);
      positions[r] = static_cast<double>(t) * config_.max_joints + j;
      if (!layout.valid[r]) continue;
      (j == 0 ? base_mask : joint_mask).row(r).setOnes();
    }
  }
  Var tokens = ag::add(ag::mul_const(lin(params_, stack + "enc.base", x), base_mask),
                       ag::mul_const(lin(params_, stack + "enc.joint", x), joint_mask));
  Matrix pe = sinusoidal_encoding(positions, h);
  for (int r = 0; r < layout.rows(); ++r) {
    if (!layout.valid[r]) pe.row(r).setZero();
  }
  tokens = ag::add_const(tokens, pe);
  if (step >= 0) {
    const Var code = ag::constant(sinusoidal_encoding({static_cast<double>(step)}, h));
    const Var embedding = lin(params_, "time.2", ag::silu(lin(params_, "time.1", code)));
    tokens = ag::mask_rows(ag::add_row(tokens, embedding), layout.valid);
  }
  return tokens;
}

Var Denoiser::graph_condition(const SkeletonGraph& graph, bool links, const std::string& stack) const {
  const int n = graph.joint_count();
  Matrix features(n, 3);
  std::vector<double> positions(n);
  for (int j = 0; j < n; ++j) {
    const Vec3& f = links ? graph.link_vectors[j] : graph.axes[j];
    features.row(j) << f.x(), f.y(), f.z();
    positions[j] = j;
  }
  if (links) features.row(0).setZero();
  const Var embedded = lin(params_, stack + (links ? "cond.link" : "cond.axis"), ag::constant(features));
  return ag::add_const(embedded, sinusoidal_encoding(positions, config_.latent));
}

Var Denoiser::run_layers(const std::string& stack, const TokenLayout& layout, Var x, const Eigen::MatrixXi& relation,
                         const std::vector<CrossCondition>& conditions, const ForwardOptions& options,
                         DenoiseTrace* trace) const {
  const double rate = config_.dropout;
  auto residual = [&](const Var& base, const Var& update) {
    return ag::mask_rows(ag::add(base, drop(update, rate, options)), layout.valid);
  };
  for (int l = 0; l < config_.layers; ++l) {
    const std::string p = stack + "layer" + std::to_string(l) + ".";
    ag::AttentionTrace* st = nullptr;
    ag::AttentionTrace* tt = nullptr;
    CrossAttentionTrace* ct = nullptr;
    if (trace) {
      st = &trace->spatial.emplace_back();
      tt = &trace->temporal.emplace_back();
      ct = &trace->cross.emplace_back();
    }
    x = residual(x, spatial_attention(layout, norm(params_, p + "spatial.norm", x), relation,
                                      SelfAttentionWeights::from(params_, p + "spatial"), config_.heads, st));
    x = residual(x, temporal_attention(layout, norm(params_, p + "temporal.norm", x), config_.temporal_window,
                                       SelfAttentionWeights::from(params_, p + "temporal"), config_.heads, tt));
    x = residual(x, multi_cond_cross_attention(norm(params_, p + "cross.norm", x), conditions, params_, p + "cross",
                                               config_.cross_heads, config_.head_dim(), ct));
    const Var hidden = drop(ag::gelu(lin(params_, p + "ffn.1", norm(params_, p + "ffn.norm", x))), rate, options);
    x = residual(x, lin(params_, p + "ffn.2", hidden));
  }
  return ag::mask_rows(norm(params_, stack + "final.norm", x), layout.valid);
}

Var Denoiser::encode_reference(const MotionClip& reference, const SkeletonGraph& source_graph,
                               const ForwardOptions& options, DenoiseTrace* trace) const {
  check_clip(reference, source_graph, "reference");
  const TokenLayout layout = TokenLayout::of(reference);
  const int n = source_graph.joint_count();
  std::vector<CrossCondition> conditions{
      {graph_condition(source_graph, false, kRefStack), all_to_all(layout, n)},
      {graph_condition(source_graph, true, kRefStack), all_to_all(layout, n)},
  };
  return run_layers(kRefStack, layout, tokenize(reference, -1, kRefStack), source_graph.relation, conditions, options,
                    trace);
}

Var Denoiser::denoise(const MotionClip& noisy, int step, const ConditionSet& c, const Var& encoded,
                      const ForwardOptions& options, DenoiseTrace* trace) const {
  check_clip(noisy, c.target_graph, "noisy");
  check_clip(c.reference, c.source_graph, "reference");
  const TokenLayout layout = TokenLayout::of(noisy);
  const TokenLayout ref_layout = TokenLayout::of(c.reference);
  if (encoded.rows() != ref_layout.rows() || encoded.cols() != config_.latent) {
    throw ShapeError("encoded reference does not match the reference clip");
  }
  const int n = c.target_graph.joint_count();
  std::vector<CrossCondition> conditions{
      {graph_condition(c.target_graph, false, ""), all_to_all(layout, n)},
      {graph_condition(c.target_graph, true, ""), all_to_all(layout, n)},
      {encoded, reference_groups(layout, ref_layout, c.map)},
  };
  const Var tokens = run_layers("", layout, tokenize(noisy, step, ""), c.target_graph.relation, conditions, options,
                                trace);
  Matrix keep = Matrix::Zero(layout.rows(), kLanes);
  for (int t = 0; t < layout.frames; ++t) {
    for (int j = 0; j < layout.joints; ++j) {
      if (!layout.valid[layout.row(t, j)]) continue;
      for (int k = 0; k < kLanes; ++k) keep(layout.row(t, j), k) = lane_active(j, k) ? 1.0 : 0.0;
    }
  }
  return ag::mul_const(lin(params_, "out", tokens), keep);
}

MotionClip Denoiser::predict(const MotionClip& noisy, int step, const ConditionSet& c) const {
  ag::NoGradGuard guard;
  const Var encoded = encode_reference(c.reference, c.source_graph);
  const Var out = denoise(noisy, step, c, encoded);
  MotionClip clip = noisy;
  clip.assign_matrix(Eigen::MatrixXd(out.value()));
  return clip;
}

}  // namespace gdream
