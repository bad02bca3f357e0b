#include "gdream/pipeline.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "gdream/error.hpp"
#include "gdream/kinematics.hpp"
#include "gdream/log.hpp"
#include "gdream/rng.hpp"

namespace gdream {

using ag::Matrix;

void DatasetOptions::validate() const {
  if (augmented_copies < 0) throw ConfigError("augmented_copies must be nonnegative");
  if (!(correspondence_drop >= 0.0 && correspondence_drop <= 1.0)) {
    throw ConfigError("correspondence_drop must be in [0, 1]");
  }
  policy.validate();
}

std::vector<TrainSample> assemble_dataset(const std::vector<MotionClip>& motions,
                                          const std::vector<SkeletonGraph>& graphs, const DatasetOptions& options,
                                          std::uint64_t seed) {
  options.validate();
  std::map<std::string, const SkeletonGraph*> by_name;
  for (const auto& g : graphs) {
    if (!by_name.emplace(g.name, &g).second) throw ConfigError("duplicate skeleton name '" + g.name + "'");
  }
  std::vector<TrainSample> out;
  for (std::size_t mi = 0; mi < motions.size(); ++mi) {
    const MotionClip& motion = motions[mi];
    const auto found = by_name.find(motion.skeleton_id);
    if (found == by_name.end()) {
      throw ConfigError("motion " + std::to_string(mi) + " references unknown skeleton '" + motion.skeleton_id + "'");
    }
    const SkeletonGraph& source = *found->second;
    if (motion.joints != source.joint_count()) {
      throw ConfigError("motion " + std::to_string(mi) + " has " + std::to_string(motion.joints) +
                        " joints but skeleton '" + source.name + "' has " + std::to_string(source.joint_count()));
    }
    for (std::size_t gi = 0; gi < graphs.size(); ++gi) {
      const SkeletonGraph& target = graphs[gi];
      const std::string id = "m" + std::to_string(mi) + ":" + source.name + "->" + target.name;
      out.push_back({id, motion, source, target, build_joint_map(source, target), scaling_factor(target, source)});
      const TrainSample base = out.back();
      for (int copy = 1; copy <= options.augmented_copies; ++copy) {
        Rng rng = Rng::derive(seed, mi * graphs.size() + gi, static_cast<std::uint64_t>(copy));
        TrainSample s = base;
        s.id = id + "#" + std::to_string(copy);
        s.target_graph = augment_skeleton(target, rng.next_u64(), options.policy);
        s.map = build_joint_map(source, s.target_graph);
        if (options.correspondence_drop > 0.0) {
          s.map = augment_correspondence(s.map, rng.next_u64(), options.correspondence_drop);
        }
        s.alpha = scaling_factor(s.target_graph, source);
        out.push_back(std::move(s));
      }
    }
  }
  return out;
}

double evaluate_positional_mse(const MotionClip& pred, const SkeletonGraph& target_graph, const MotionClip& reference,
                               const JointMap& map, double alpha) {
  const auto pairs = map.active_pairs();
  if (pairs.empty()) throw DomainError("positional MSE is undefined for an empty joint map");
  if (pred.frames != reference.frames) throw ShapeError("prediction and reference frame counts differ");
  if (pred.joints < target_graph.joint_count()) throw ShapeError("prediction has fewer joints than the target graph");
  for (const auto& p : pairs) {
    if (p.source >= reference.joints || p.target >= target_graph.joint_count()) {
      throw ShapeError("joint pair '" + p.semantic + "' is out of range");
    }
  }
  const auto scaled = scaled_reference_positions(reference, alpha);
  double sum = 0.0;
  long count = 0;
  for (int t = 0; t < pred.frames; ++t) {
    if (!pred.frame_valid[t] || !reference.frame_valid[t]) continue;
    const FkFrame fk = forward_kinematics(pose_from_clip(pred, t, target_graph.joint_count()), target_graph);
    for (const auto& p : pairs) {
      if (!reference.joint_valid[p.source]) continue;
      sum += (fk.positions[p.target] - scaled[t][p.source]).squaredNorm();
      ++count;
    }
  }
  if (count == 0) throw DomainError("positional MSE is undefined without a valid pair-frame");
  return sum / static_cast<double>(count) * 1e4;
}

NormalizationStats dataset_stats(const std::vector<TrainSample>& dataset, double min_std) {
  std::vector<MotionClip> clips;
  for (const auto& s : dataset) clips.push_back(relay_to_target(s.reference, s.target_graph.joint_count(), s.alpha));
  return NormalizationStats::compute(clips, min_std);
}

double AdamOptions::rate_at(std::int64_t step) const {
  if (decay_steps <= 0) return learning_rate;
  const double progress = std::min(static_cast<double>(step) / static_cast<double>(decay_steps), 1.0);
  return final_learning_rate + (learning_rate - final_learning_rate) * 0.5 * (1.0 + std::cos(M_PI * progress));
}

void adam_step(ParameterSet& params, AdamState& state, const AdamOptions& o) {
  double scale = 1.0;
  if (o.grad_clip > 0.0) {
    double norm2 = 0.0;
    for (const auto& [name, var] : params.all()) norm2 += var.grad().squaredNorm();
    const double norm = std::sqrt(norm2);
    if (norm > o.grad_clip) scale = o.grad_clip / norm;
  }
  state.step += 1;
  const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  const double rate = o.rate_at(state.step - 1);
  for (const auto& [name, var] : params.all()) {
    const Matrix g = var.grad() * scale;
    Matrix& m = state.m.try_emplace(name, Matrix::Zero(g.rows(), g.cols())).first->second;
    Matrix& v = state.v.try_emplace(name, Matrix::Zero(g.rows(), g.cols())).first->second;
    m = o.beta1 * m + (1.0 - o.beta1) * g;
    v = o.beta2 * v + (1.0 - o.beta2) * g.cwiseProduct(g);
    Matrix& p = const_cast<ag::Var&>(var).mutable_value();
    p.array() -= rate * (m.array() / c1) / ((v.array() / c2).sqrt() + o.epsilon);
  }
}

nlohmann::json to_json(const MetricsRecord& r) {
  nlohmann::json j = {
      {"step", r.step}, {"total", r.total}, {"recon_loss", r.reconstruction}, {"guidance_loss", r.guidance}};
  if (!r.eval_mse.empty()) j["eval_mse"] = r.eval_mse;
  return j;
}

void TrainOptions::validate() const {
  if (steps < 0) throw ConfigError("steps must be nonnegative");
  if (batch_size < 1) throw ConfigError("batch_size must be positive");
  if (!(adam.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
    throw ConfigError("Adam betas must be in [0, 1)");
  }
  if (!(adam.epsilon > 0.0) || adam.grad_clip < 0.0) throw ConfigError("invalid Adam epsilon or grad_clip");
  if (adam.decay_steps < 0 || adam.final_learning_rate < 0.0) throw ConfigError("invalid learning-rate decay");
  if (checkpoint_every < 1 || log_every < 1 || eval_every < 0) throw ConfigError("cadences must be positive");
  if (eval_sample_steps < 1) throw ConfigError("eval_sample_steps must be positive");
}

std::map<std::string, double> evaluate_checkpoint(const Checkpoint& checkpoint, const std::vector<TrainSample>& eval_set,
                                                  int sample_steps, std::uint64_t seed) {
  const Denoiser model = make_denoiser(checkpoint);
  std::map<std::string, std::pair<double, int>> acc;
  for (std::size_t i = 0; i < eval_set.size(); ++i) {
    const TrainSample& s = eval_set[i];
    const MotionClip out =
        sample(s, model, checkpoint.schedule, Rng::derive(seed, i).next_u64(), {sample_steps, true});
    auto& [sum, n] = acc[s.target_graph.name];
    sum += evaluate_positional_mse(out, s.target_graph, s.reference, s.map, s.alpha);
    ++n;
  }
  std::map<std::string, double> mse;
  for (const auto& [name, v] : acc) mse[name] = v.first / v.second;
  return mse;
}

Checkpoint train(const std::vector<TrainSample>& dataset, Checkpoint checkpoint, const GuidanceWeights& weights,
                 const TrainOptions& options, TrainReport* report) {
  options.validate();
  weights.validate();
  if (options.steps == 0) return checkpoint;
  if (dataset.empty()) throw ConfigError("training dataset is empty");

  Denoiser model = make_denoiser(checkpoint);
  std::ofstream metrics;
  if (!options.metrics_path.empty()) {
    const std::filesystem::path p(options.metrics_path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    metrics.open(options.metrics_path, std::ios::app);
    if (!metrics) throw FormatError("cannot open metrics log '" + options.metrics_path + "'");
  }
  const bool dropout = checkpoint.config.dropout > 0.0;
  const std::int64_t first = checkpoint.step + 1;
  const std::int64_t last = checkpoint.step + options.steps;
  for (std::int64_t step = first; step <= last; ++step) {
    Rng rng = Rng::derive(options.seed, static_cast<std::uint64_t>(step), 0);
    Rng dropout_rng = Rng::derive(options.seed, static_cast<std::uint64_t>(step), 1);
    std::vector<const TrainSample*> batch;
    for (int b = 0; b < options.batch_size; ++b) batch.push_back(&dataset[rng.index(dataset.size())]);

    model.params().zero_grad();
    TrainingLoss loss;
    try {
      loss = training_loss(batch, model, checkpoint.schedule, weights, rng, dropout ? &dropout_rng : nullptr);
    } catch (const NumericError& e) {
      std::string ids;
      for (const auto* s : batch) ids += (ids.empty() ? "" : ", ") + s->id;
      throw NumericError(std::string(e.what()) + " at training step " + std::to_string(step) + " [batch: " + ids +
                         "]");
    }
    ag::backward(loss.total);
    adam_step(model.params(), checkpoint.adam, options.adam);
    checkpoint.step = step;

    const bool eval = options.eval_every > 0 && !options.eval_set.empty() && step % options.eval_every == 0;
    if (options.record_every_step || eval || step % options.log_every == 0 || step == last) {
      MetricsRecord record{step, loss.breakdown.total, loss.breakdown.reconstruction, loss.breakdown.guidance, {}};
      if (eval) {
        store_params(checkpoint, model);
        record.eval_mse = evaluate_checkpoint(checkpoint, options.eval_set, options.eval_sample_steps, options.seed);
      }
      if (metrics.is_open()) metrics << to_json(record).dump() << '\n' << std::flush;
      log().info("step {} loss {:.6g} (recon {:.6g}, guidance {:.6g})", step, record.total, record.reconstruction,
                 record.guidance);
      if (options.on_record) options.on_record(record);
      if (report) report->records.push_back(std::move(record));
    }
    if (!options.checkpoint_dir.empty() && step % options.checkpoint_every == 0) {
      store_params(checkpoint, model);
      save_checkpoint(checkpoint, (std::filesystem::path(options.checkpoint_dir) /
                                   ("step_" + std::to_string(step) + ".ckpt"))
                                      .string());
    }
  }
  store_params(checkpoint, model);
  return checkpoint;
}

Checkpoint adapt(const Checkpoint& base, const AdaptInputs& inputs, const GuidanceWeights& weights,
                 const TrainOptions& options, const DenoiserConfig* expected, TrainReport* report) {
  if (expected && !(*expected == base.config)) throw ConfigError("configuration does not match the checkpoint");
  for (const auto& g : inputs.new_graphs) {
    if (g.joint_count() > base.config.max_joints) {
      throw ConfigError("graph '" + g.name + "' has more joints than the checkpoint supports");
    }
  }
  if (inputs.new_graphs.empty() && options.steps == 0) return base;
  std::vector<SkeletonGraph> graphs = inputs.graphs;
  graphs.insert(graphs.end(), inputs.new_graphs.begin(), inputs.new_graphs.end());
  const auto dataset = assemble_dataset(inputs.motions, graphs, inputs.dataset, inputs.dataset_seed);
  Checkpoint out = train(dataset, base, weights, options, report);
  auto& names = out.meta["adapted_embodiments"];
  for (const auto& g : inputs.new_graphs) names.push_back(g.name);
  return out;
}

}  // namespace gdream
