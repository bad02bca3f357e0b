#include "gdream/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "gdream/error.hpp"
#include "gdream/kinematics.hpp"
#include "gdream/rng.hpp"

namespace gdream {

using ag::Matrix;

NormalizationStats NormalizationStats::identity() {
  NormalizationStats s;
  s.base_std.fill(1.0);
  s.joint_std.fill(1.0);
  return s;
}

NormalizationStats NormalizationStats::compute(const std::vector<MotionClip>& clips, double min_std) {
  if (!(min_std > 0.0)) throw ConfigError("min_std must be positive");
  std::array<double, kLanes> base_sum{}, base_sq{}, joint_sum{}, joint_sq{};
  double base_n = 0.0;
  double joint_n = 0.0;
  for (const auto& clip : clips) {
    for (int t = 0; t < clip.frames; ++t) {
      for (int j = 0; j < clip.joints; ++j) {
        if (!clip.valid(t, j)) continue;
        auto& sum = j == 0 ? base_sum : joint_sum;
        auto& sq = j == 0 ? base_sq : joint_sq;
        (j == 0 ? base_n : joint_n) += 1.0;
        for (int l = 0; l < kLanes; ++l) {
          sum[l] += clip.at(t, j, l);
          sq[l] += clip.at(t, j, l) * clip.at(t, j, l);
        }
      }
    }
  }
  NormalizationStats s = identity();
  auto finish = [min_std](double n, const auto& sum, const auto& sq, auto& mean, auto& std, bool base) {
    if (n == 0.0) return;
    for (int l = 0; l < kLanes; ++l) {
      if (!base && l >= lane::kPadBegin) continue;
      mean[l] = sum[l] / n;
      const double var = std::max(sq[l] / n - mean[l] * mean[l], 0.0);
      std[l] = std::max(std::sqrt(var), min_std);
    }
  };
  finish(base_n, base_sum, base_sq, s.base_mean, s.base_std, true);
  finish(joint_n, joint_sum, joint_sq, s.joint_mean, s.joint_std, false);
  return s;
}

MotionClip NormalizationStats::normalize(const MotionClip& clip) const {
  MotionClip out = clip;
  for (int t = 0; t < clip.frames; ++t) {
    for (int j = 0; j < clip.joints; ++j) {
      if (!clip.valid(t, j)) continue;
      for (int l = 0; l < kLanes; ++l) {
        if (lane_active(j, l)) out.at(t, j, l) = (clip.at(t, j, l) - mean(j, l)) / std(j, l);
      }
    }
  }
  return out;
}

MotionClip NormalizationStats::denormalize(const MotionClip& clip) const {
  MotionClip out = clip;
  for (int t = 0; t < clip.frames; ++t) {
    for (int j = 0; j < clip.joints; ++j) {
      if (!clip.valid(t, j)) continue;
      for (int l = 0; l < kLanes; ++l) {
        if (lane_active(j, l)) out.at(t, j, l) = clip.at(t, j, l) * std(j, l) + mean(j, l);
      }
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const NormalizationStats& s) {
  j = {{"base_mean", s.base_mean}, {"base_std", s.base_std}, {"joint_mean", s.joint_mean}, {"joint_std", s.joint_std}};
}

void from_json(const nlohmann::json& j, NormalizationStats& s) {
  j.at("base_mean").get_to(s.base_mean);
  j.at("base_std").get_to(s.base_std);
  j.at("joint_mean").get_to(s.joint_mean);
  j.at("joint_std").get_to(s.joint_std);
  for (int l = 0; l < kLanes; ++l) {
    if (!(s.base_std[l] > 0.0) || !(s.joint_std[l] > 0.0)) throw FormatError("normalization std must be positive");
  }
}

int NoiseSchedule::index_of(double sigma) const {
  if (!(sigma > 0.0)) throw DomainError("sigma must be positive");
  const double target = std::log(sigma);
  int best = 0;
  double gap = std::abs(std::log(sigmas[0]) - target);
  for (int i = 1; i < static_cast<int>(sigmas.size()); ++i) {
    const double d = std::abs(std::log(sigmas[i]) - target);
    if (d < gap) {
      gap = d;
      best = i;
    }
  }
  return best;
}

void to_json(nlohmann::json& j, const NoiseSchedule& s) {
  j = {{"steps", s.steps}, {"sigma_min", s.sigma_min}, {"sigma_max", s.sigma_max}, {"stats", s.stats}};
}

void from_json(const nlohmann::json& j, NoiseSchedule& s) {
  s = build_schedule(j.at("steps").get<int>(), j.at("sigma_min").get<double>(), j.at("sigma_max").get<double>());
  if (j.contains("stats")) s.stats = j.at("stats").get<NormalizationStats>();
}

NoiseSchedule build_schedule(int steps, double sigma_min, double sigma_max) {
  if (steps < 1) throw ConfigError("schedule needs at least one step");
  if (!(sigma_min > 0.0) || !(sigma_max > sigma_min) || !std::isfinite(sigma_max)) {
    throw ConfigError("schedule bounds must satisfy 0 < sigma_min < sigma_max");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.sigma_min = sigma_min;
  s.sigma_max = sigma_max;
  s.sigmas.resize(steps);
  const double ratio = sigma_min / sigma_max;
  for (int i = 0; i < steps; ++i) {
    s.sigmas[i] = steps == 1 ? sigma_max : sigma_max * std::pow(ratio, static_cast<double>(i) / (steps - 1));
  }
  if (steps > 1) {
    s.sigmas.front() = sigma_max;
    s.sigmas.back() = sigma_min;
  }
  return s;
}

MotionClip perturb(const MotionClip& x, double sigma, Rng& rng) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw DomainError("sigma must be nonnegative");
  MotionClip out = x;
  for (int t = 0; t < x.frames; ++t) {
    for (int j = 0; j < x.joints; ++j) {
      if (!x.valid(t, j)) continue;
      for (int l = 0; l < kLanes; ++l) {
        if (lane_active(j, l)) out.at(t, j, l) += sigma * rng.normal();
      }
    }
  }
  return out;
}

MotionClip perturb(const MotionClip& x, double sigma, std::uint64_t seed) {
  Rng rng(seed);
  return perturb(x, sigma, rng);
}

MotionClip relay_to_target(const MotionClip& reference, int target_joints, double alpha) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw DomainError("scaling factor must be positive");
  MotionClip out = MotionClip::zeros(reference.frames, target_joints, reference.fps);
  out.frame_valid = reference.frame_valid;
  for (int j = 0; j < target_joints; ++j) out.joint_valid[j] = j < reference.joints && reference.joint_valid[j];
  auto scaled = [](int j, int l) {
    if (j == 0) return l >= lane::kBasePosition;
    return l >= lane::kPosition && l < lane::kPadBegin;
  };
  for (int t = 0; t < reference.frames; ++t) {
    for (int j = 0; j < target_joints; ++j) {
      if (!out.valid(t, j)) continue;
      for (int l = 0; l < kLanes; ++l) {
        if (lane_active(j, l)) out.at(t, j, l) = (scaled(j, l) ? alpha : 1.0) * reference.at(t, j, l);
      }
    }
  }
  return out;
}

MotionClip training_target(const TrainSample& sample, const NormalizationStats& stats) {
  MotionClip clean =
      stats.normalize(relay_to_target(sample.reference, sample.target_graph.joint_count(), sample.alpha));
  std::fill(clean.joint_valid.begin(), clean.joint_valid.end(), 1);
  clean.skeleton_id = sample.target_graph.name;
  return clean;
}

Matrix reconstruction_mask(const MotionClip& reference, int target_joints) {
  Matrix mask = Matrix::Zero(static_cast<Eigen::Index>(reference.frames) * target_joints, kLanes);
  for (int t = 0; t < reference.frames; ++t) {
    for (int j = 0; j < std::min(target_joints, reference.joints); ++j) {
      if (!reference.valid(t, j)) continue;
      for (int l = 0; l < kLanes; ++l) {
        if (lane_active(j, l)) mask(t * target_joints + j, l) = 1.0;
      }
    }
  }
  return mask;
}

double input_scale(double sigma) { return 1.0 / std::sqrt(sigma * sigma + 1.0); }

ag::Var apply_denoiser(const Denoiser& model, const MotionClip& noisy, const NoiseSchedule& schedule, int step,
                       const ConditionSet& conditions, const ag::Var& encoded, const ForwardOptions& options) {
  if (step < 0 || step >= schedule.steps) throw DomainError("schedule index out of range");
  MotionClip scaled = noisy;
  const double c = input_scale(schedule.sigmas[step]);
  for (double& v : scaled.data) v *= c;
  return model.denoise(scaled, step, conditions, encoded, options);
}

namespace {

// Prediction matrix as a clip on the layout of `like`.
MotionClip to_clip(const Matrix& m, const MotionClip& like) {
  MotionClip clip = like;
  clip.assign_matrix(Eigen::MatrixXd(m));
  return clip;
}

Matrix std_matrix(const NormalizationStats& stats, const MotionClip& like) {
  Matrix s = Matrix::Zero(static_cast<Eigen::Index>(like.frames) * like.joints, kLanes);
  for (int t = 0; t < like.frames; ++t) {
    for (int j = 0; j < like.joints; ++j) {
      for (int l = 0; l < kLanes; ++l) s(t * like.joints + j, l) = stats.std(j, l);
    }
  }
  return s;
}

}  // namespace

TrainingLoss training_loss(const std::vector<const TrainSample*>& batch, const Denoiser& model,
                           const NoiseSchedule& schedule, const GuidanceWeights& weights, Rng& rng, Rng* dropout_rng) {
  if (batch.empty()) throw ConfigError("training batch is empty");
  weights.validate();
  const NormalizationStats& stats = schedule.stats;
  const ForwardOptions options{dropout_rng};
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  TrainingLoss result;
  std::vector<ag::Var> terms;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const TrainSample& s = *batch[b];
    const int target_joints = s.target_graph.joint_count();
    const MotionClip ref_norm = stats.normalize(s.reference);
    const MotionClip clean = training_target(s, stats);
    const int step = static_cast<int>(rng.index(static_cast<std::uint64_t>(schedule.steps)));
    const MotionClip noisy = perturb(clean, schedule.sigmas[step], rng);

    const ag::Var encoded = model.encode_reference(ref_norm, s.source_graph, options);
    const ag::Var out =
        apply_denoiser(model, noisy, schedule, step, {ref_norm, s.source_graph, s.target_graph, s.map}, encoded, options);

    const Matrix mask = reconstruction_mask(s.reference, target_joints);
    const double count = std::max(mask.sum(), 1.0);
    const ag::Var recon =
        ag::scale(ag::weighted_squared_error(out, Matrix(clean.as_matrix()), mask), 1.0 / count);

    const MotionClip pred = stats.denormalize(to_clip(out.value(), noisy));
    std::vector<double> grad;
    const EnergyBreakdown energy =
        f_kin_energy_with_gradient(pred, {s.target_graph, s.reference, s.map, s.alpha}, weights, grad);
    Matrix g = Eigen::Map<const Matrix>(grad.data(), out.rows(), out.cols());
    g = g.cwiseProduct(std_matrix(stats, noisy)) * weights.lambda;
    const double guidance_value = weights.lambda * energy.total;
    if (!std::isfinite(recon.scalar()) || !std::isfinite(guidance_value)) {
      throw NumericError("non-finite training loss at batch index " + std::to_string(b) + " (sample '" + s.id + "')");
    }
    const ag::Var guidance = ag::external(out, guidance_value, std::move(g));
    terms.push_back(ag::scale(recon, inv_batch));
    terms.push_back(ag::scale(guidance, inv_batch));
    result.breakdown.reconstruction += recon.scalar() * inv_batch;
    result.breakdown.guidance += guidance_value * inv_batch;
    result.breakdown.energies.push_back(energy);
    result.breakdown.steps.push_back(step);
    result.breakdown.predictions.push_back(pred);
  }
  result.total = ag::add_scalars(terms);
  result.breakdown.total = result.total.scalar();
  return result;
}

MotionClip sample(const TrainSample& c, const Denoiser& model, const NoiseSchedule& schedule, std::uint64_t seed,
                  const SampleOptions& options, SampleTrace* trace) {
  const int n = schedule.steps;
  const int count = options.steps == 0 ? n : options.steps;
  if (count < 1 || count > n) throw ConfigError("sampling steps must be in [1, " + std::to_string(n) + "]");
  std::vector<int> indices(count);
  for (int k = 0; k < count; ++k) {
    indices[k] = count == 1 ? 0 : static_cast<int>(std::lround(static_cast<double>(k) * (n - 1) / (count - 1)));
  }
  if (trace) {
    trace->indices = indices;
    trace->sigmas.clear();
    for (int i : indices) trace->sigmas.push_back(schedule.sigmas[i]);
  }

  const NormalizationStats& stats = schedule.stats;
  const int target_joints = c.target_graph.joint_count();
  const MotionClip ref_norm = stats.normalize(c.reference);
  MotionClip layout = MotionClip::zeros(c.reference.frames, target_joints, c.reference.fps, c.target_graph.name);
  layout.frame_valid = c.reference.frame_valid;
  const ConditionSet conditions{ref_norm, c.source_graph, c.target_graph, c.map};

  ag::NoGradGuard guard;
  const ag::Var encoded = model.encode_reference(ref_norm, c.source_graph);
  MotionClip x = perturb(layout, schedule.sigmas[indices[0]], seed);
  auto denoise = [&](const MotionClip& state, int k) {
    return to_clip(apply_denoiser(model, state, schedule, indices[k], conditions, encoded).value(), state);
  };
  auto check = [&](const MotionClip& state, int k) {
    for (double v : state.data) {
      if (!std::isfinite(v)) throw SamplingError("sampler state became non-finite", k);
    }
  };
  for (int k = 0; k + 1 < count; ++k) {
    const double sigma = schedule.sigmas[indices[k]];
    const double next = schedule.sigmas[indices[k + 1]];
    const MotionClip d = denoise(x, k);
    for (std::size_t e = 0; e < x.data.size(); ++e) x.data[e] += (next - sigma) * (x.data[e] - d.data[e]) / sigma;
    check(x, k);
  }
  MotionClip out = stats.denormalize(denoise(x, count - 1));
  check(out, count - 1);
  out.skeleton_id = c.target_graph.name;
  return options.fk_lanes ? with_fk_lanes(out, c.target_graph) : out;
}

}  // namespace gdream
