#include "gdream/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include <CLI11.hpp>
#include <Eigen/Core>

#include "file_util.hpp"
#include "gdream/checkpoint.hpp"
#include "gdream/error.hpp"
#include "gdream/kinematics.hpp"
#include "gdream/log.hpp"
#include "gdream/motion.hpp"
#include "gdream/report.hpp"
#include "gdream/urdf.hpp"

namespace gdream {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

std::string resolve(const std::string& path, const std::string& base_dir) {
  if (path.empty() || fs::path(path).is_absolute()) return path;
  return (fs::path(base_dir) / path).lexically_normal().string();
}

GraphSource graph_source_from_json(const json& j, const std::string& base_dir) {
  GraphSource s;
  if (j.is_string()) {
    s.path = resolve(j.get<std::string>(), base_dir);
    return s;
  }
  check_keys(j, {"path", "key_joints", "name"}, "graph entry");
  s.path = resolve(j.at("path").get<std::string>(), base_dir);
  s.key_joints = resolve(j.value("key_joints", ""), base_dir);
  s.name = j.value("name", "");
  return s;
}

template <typename T>
void read(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

void require_file(const std::string& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw ConfigError(what + " '" + path + "' does not exist");
}

}  // namespace

void RunConfig::validate() const {
  for (const auto* list : {&graphs, &new_graphs}) {
    for (const auto& g : *list) {
      require_file(g.path, "graph");
      if (!g.key_joints.empty()) require_file(g.key_joints, "key-joint file");
    }
  }
  for (const auto& m : motions) require_file(m, "motion");
  model.validate();
  if (schedule_steps < 1 || !(sigma_min > 0.0 && sigma_min < sigma_max)) {
    throw ConfigError("schedule needs steps >= 1 and 0 < sigma_min < sigma_max");
  }
  if (!(min_std > 0.0)) throw ConfigError("min_std must be positive");
  guidance.validate();
  augmentation.validate();
  training.validate();
  if (sampling.steps < 0 || sampling.steps > schedule_steps) {
    throw ConfigError("sampling steps must be in [0, schedule steps]");
  }
  if (baseline.steps < 0 || !(baseline.step_size > 0.0)) throw ConfigError("invalid baseline options");
}

RunConfig parse_run_config(const json& j, const std::string& base_dir) {
  RunConfig c;
  try {
    check_keys(j,
               {"graphs", "new_graphs", "motions", "model", "schedule", "guidance", "augmentation", "dataset_seed",
                "training", "sampling", "baseline", "seed"},
               "config");
    for (const auto& g : j.value("graphs", json::array())) c.graphs.push_back(graph_source_from_json(g, base_dir));
    for (const auto& g : j.value("new_graphs", json::array())) {
      c.new_graphs.push_back(graph_source_from_json(g, base_dir));
    }
    for (const auto& m : j.value("motions", json::array())) c.motions.push_back(resolve(m.get<std::string>(), base_dir));

    if (j.contains("model")) {
      check_keys(j["model"],
                 {"latent", "heads", "cross_heads", "layers", "ffn_dim", "dropout", "temporal_window", "max_frames",
                  "max_joints"},
                 "model");
      c.model = j["model"].get<DenoiserConfig>();
    }
    if (j.contains("schedule")) {
      const auto& s = j["schedule"];
      check_keys(s, {"steps", "sigma_min", "sigma_max", "min_std"}, "schedule");
      read(s, "steps", c.schedule_steps);
      read(s, "sigma_min", c.sigma_min);
      read(s, "sigma_max", c.sigma_max);
      read(s, "min_std", c.min_std);
    }
    if (j.contains("guidance")) {
      const auto& g = j["guidance"];
      check_keys(g, {"similar", "consistency", "velocity", "norm", "lambda", "norm_epsilon"}, "guidance");
      read(g, "similar", c.guidance.similar);
      read(g, "consistency", c.guidance.consistency);
      read(g, "velocity", c.guidance.velocity);
      read(g, "norm", c.guidance.norm);
      read(g, "lambda", c.guidance.lambda);
      read(g, "norm_epsilon", c.guidance.norm_epsilon);
    }
    if (j.contains("augmentation")) {
      const auto& a = j["augmentation"];
      check_keys(a, {"copies", "key_min", "key_max", "other_min", "other_max", "correspondence_drop"}, "augmentation");
      read(a, "copies", c.augmentation.augmented_copies);
      read(a, "key_min", c.augmentation.policy.key_min);
      read(a, "key_max", c.augmentation.policy.key_max);
      read(a, "other_min", c.augmentation.policy.other_min);
      read(a, "other_max", c.augmentation.policy.other_max);
      read(a, "correspondence_drop", c.augmentation.correspondence_drop);
    }
    read(j, "dataset_seed", c.dataset_seed);
    if (j.contains("training")) {
      const auto& t = j["training"];
      check_keys(t,
                 {"steps", "batch_size", "learning_rate", "final_learning_rate", "decay_steps", "beta1", "beta2",
                  "epsilon", "grad_clip", "checkpoint_every", "log_every", "eval_every", "eval_sample_steps"},
                 "training");
      read(t, "steps", c.training.steps);
      read(t, "batch_size", c.training.batch_size);
      read(t, "learning_rate", c.training.adam.learning_rate);
      read(t, "final_learning_rate", c.training.adam.final_learning_rate);
      read(t, "decay_steps", c.training.adam.decay_steps);
      read(t, "beta1", c.training.adam.beta1);
      read(t, "beta2", c.training.adam.beta2);
      read(t, "epsilon", c.training.adam.epsilon);
      read(t, "grad_clip", c.training.adam.grad_clip);
      read(t, "checkpoint_every", c.training.checkpoint_every);
      read(t, "log_every", c.training.log_every);
      read(t, "eval_every", c.training.eval_every);
      read(t, "eval_sample_steps", c.training.eval_sample_steps);
    }
    if (j.contains("sampling")) {
      check_keys(j["sampling"], {"steps", "fk_lanes"}, "sampling");
      read(j["sampling"], "steps", c.sampling.steps);
      read(j["sampling"], "fk_lanes", c.sampling.fk_lanes);
    }
    if (j.contains("baseline")) {
      check_keys(j["baseline"], {"steps", "step_size"}, "baseline");
      read(j["baseline"], "steps", c.baseline.steps);
      read(j["baseline"], "step_size", c.baseline.step_size);
    }
    read(j, "seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config: ") + e.what());
  }
  c.training.seed = c.seed;
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  json j;
  try {
    j = json::parse(detail::read_text_file(path));
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + path + "': " + e.what());
  }
  return parse_run_config(j, fs::path(path).parent_path().string());
}

SkeletonGraph load_graph_source(const GraphSource& source) {
  const bool is_json = fs::path(source.path).extension() == ".json";
  SkeletonGraph g = is_json ? load_graph(source.path) : parse_urdf_file(source.path);
  if (!source.key_joints.empty()) {
    auto keys = load_key_joint_names(source.key_joints);
    // Keys already present in a graph file are replaced as a whole.
    g.key_joints.clear();
    g = with_key_joints(std::move(g), keys);
  }
  if (!source.name.empty()) g.name = source.name;
  if (g.name.empty()) g.name = fs::path(source.path).stem().string();
  g.validate();
  return g;
}

namespace {

struct Loaded {
  std::vector<MotionClip> motions;
  std::vector<SkeletonGraph> graphs;
  std::vector<SkeletonGraph> new_graphs;
};

Loaded load_inputs(const RunConfig& cfg) {
  Loaded l;
  for (const auto& m : cfg.motions) l.motions.push_back(load_clip(m));
  for (const auto& g : cfg.graphs) l.graphs.push_back(load_graph_source(g));
  for (const auto& g : cfg.new_graphs) l.new_graphs.push_back(load_graph_source(g));
  return l;
}

void write_json(const std::string& path, const json& j) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  detail::write_text_file(path, j.dump(2) + "\n");
}

/// Base samples only (no augmented copies), used for evaluation during training.
std::vector<TrainSample> base_samples(const std::vector<TrainSample>& dataset) {
  std::vector<TrainSample> out;
  for (const auto& s : dataset) {
    if (s.id.find('#') == std::string::npos) out.push_back(s);
  }
  return out;
}

void log_record(const MetricsRecord& r) {
  log().info("step {} total {:.6g} recon {:.6g} guidance {:.6g}", r.step, r.total, r.reconstruction, r.guidance);
  for (const auto& [name, mse] : r.eval_mse) log().info("step {} eval {} {:.6g} cm^2", r.step, name, mse);
}

/// Options shared by retarget, baseline and evaluate: one reference clip on a
/// source graph retargeted to a target graph.
struct PairArgs {
  std::string motion;
  GraphSource source;
  GraphSource target;
  std::string map;
  double alpha = 0.0;

  void add_to(CLI::App& app) {
    app.add_option("--motion,--reference", motion, "Reference clip")->required()->check(CLI::ExistingFile);
    app.add_option("--source", source.path, "Source graph (.json or URDF)")->required()->check(CLI::ExistingFile);
    app.add_option("--source-keys", source.key_joints, "Key joints of the source")->check(CLI::ExistingFile);
    app.add_option("--target", target.path, "Target graph (.json or URDF)")->required()->check(CLI::ExistingFile);
    app.add_option("--target-keys", target.key_joints, "Key joints of the target")->check(CLI::ExistingFile);
    app.add_option("--map", map, "Joint map file; default pairs the key joints")->check(CLI::ExistingFile);
    app.add_option("--alpha", alpha, "Scale factor; default is the leg-length ratio")->check(CLI::PositiveNumber);
  }

  TrainSample load() const {
    TrainSample s;
    s.reference = load_clip(motion);
    s.source_graph = load_graph_source(source);
    s.target_graph = load_graph_source(target);
    s.map = map.empty() ? build_joint_map(s.source_graph, s.target_graph) : load_joint_map(map);
    if (s.map.source_joint_count != s.source_graph.joint_count() ||
        s.map.target_joint_count != s.target_graph.joint_count()) {
      throw ConfigError("joint map does not fit the source and target graphs");
    }
    s.alpha = alpha > 0.0 ? alpha : scaling_factor(s.target_graph, s.source_graph);
    s.id = fs::path(motion).stem().string();
    return s;
  }
};

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Graph-conditioned diffusion motion retargeting", "gdream"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--device-threads", threads, "Eigen worker threads (0 keeps the default)")
      ->check(CLI::NonNegativeNumber);

  std::string config_path, out_path, checkpoint_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::int64_t> steps;
  auto add_config = [&](CLI::App* sub, bool required) {
    auto* o = sub->add_option("--config", config_path, "Run configuration (JSON)")->check(CLI::ExistingFile);
    if (required) o->required();
  };
  auto add_seed = [&](CLI::App* sub) { sub->add_option("--seed", seed, "Seed of every stochastic step"); };
  auto add_steps = [&](CLI::App* sub, const char* what) {
    sub->add_option("--steps", steps, what)->check(CLI::NonNegativeNumber);
  };

  // parse-urdf
  auto* parse_urdf_cmd = app.add_subcommand("parse-urdf", "URDF (or graph file) to skeleton graph file");
  std::string urdf_input;
  GraphSource urdf_source;
  parse_urdf_cmd->add_option("input", urdf_input, "URDF or graph JSON")->required()->check(CLI::ExistingFile);
  parse_urdf_cmd->add_option("--key-joints", urdf_source.key_joints, "Key-joint file")->check(CLI::ExistingFile);
  parse_urdf_cmd->add_option("--name", urdf_source.name, "Graph name");
  parse_urdf_cmd->add_option("--out", out_path, "Graph file")->required();

  auto* dataset_cmd = app.add_subcommand("build-dataset", "Write the training sample manifest");
  add_config(dataset_cmd, true);
  add_seed(dataset_cmd);
  dataset_cmd->add_option("--out", out_path, "Manifest file")->required();

  auto* train_cmd = app.add_subcommand("train", "Train a denoiser");
  add_config(train_cmd, true);
  add_seed(train_cmd);
  add_steps(train_cmd, "Training steps (overrides the config)");
  train_cmd->add_option("--checkpoint", checkpoint_path, "Resume from this checkpoint")->check(CLI::ExistingFile);
  train_cmd->add_option("--out", out_path, "Output directory")->required();

  auto* adapt_cmd = app.add_subcommand("adapt", "Continue training with new embodiments");
  add_config(adapt_cmd, true);
  add_seed(adapt_cmd);
  add_steps(adapt_cmd, "Training steps (overrides the config)");
  adapt_cmd->add_option("--checkpoint", checkpoint_path, "Base checkpoint")->required()->check(CLI::ExistingFile);
  adapt_cmd->add_option("--out", out_path, "Output directory")->required();

  PairArgs pair;
  auto* retarget_cmd = app.add_subcommand("retarget", "Retarget a clip by diffusion sampling");
  add_config(retarget_cmd, false);
  add_seed(retarget_cmd);
  add_steps(retarget_cmd, "Denoiser evaluations (0 uses every level)");
  retarget_cmd->add_option("--checkpoint", checkpoint_path, "Model")->required()->check(CLI::ExistingFile);
  pair.add_to(*retarget_cmd);
  retarget_cmd->add_option("--out", out_path, "Output clip")->required();

  auto* baseline_cmd = app.add_subcommand("baseline", "Retarget a clip by direct optimization");
  add_config(baseline_cmd, false);
  add_steps(baseline_cmd, "Optimizer iterations");
  pair.add_to(*baseline_cmd);
  baseline_cmd->add_option("--out", out_path, "Output clip")->required();

  auto* evaluate_cmd = app.add_subcommand("evaluate", "Positional MSE of retargeted clips");
  std::vector<std::string> preds;
  std::string embodiment;
  pair.add_to(*evaluate_cmd);
  evaluate_cmd->add_option("--pred", preds, "label=clip, repeatable")->required();
  evaluate_cmd->add_option("--embodiment", embodiment, "Column name; default is the target graph name");
  evaluate_cmd->add_option("--out", out_path, "Evaluation file")->required();

  auto* report_cmd = app.add_subcommand("report", "Table and trajectory plots from evaluations");
  std::vector<std::string> evals;
  report_cmd->add_option("--eval", evals, "Evaluation files")->required()->check(CLI::ExistingFile);
  report_cmd->add_option("--out", out_path, "Output directory")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (threads > 0) Eigen::setNbThreads(threads);
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_run_config(config_path);
    if (seed) {
      cfg.seed = *seed;
      cfg.training.seed = *seed;
    }

    if (*parse_urdf_cmd) {
      urdf_source.path = urdf_input;
      const SkeletonGraph g = load_graph_source(urdf_source);
      save_graph(g, out_path);
      out << "graph '" << g.name << "': " << g.joint_count() << " joints, " << g.key_joints.size()
          << " key joints\n";
    } else if (*dataset_cmd) {
      const Loaded in = load_inputs(cfg);
      const auto dataset = assemble_dataset(in.motions, in.graphs, cfg.augmentation, seed ? *seed : cfg.dataset_seed);
      json samples = json::array();
      for (const auto& s : dataset) {
        samples.push_back({{"id", s.id},
                           {"source", s.source_graph.name},
                           {"target", s.target_graph.name},
                           {"alpha", s.alpha},
                           {"frames", s.reference.frames},
                           {"active_pairs", s.map.active_pairs().size()}});
      }
      write_json(out_path, {{"dataset_seed", seed ? *seed : cfg.dataset_seed}, {"samples", samples}});
      out << dataset.size() << " samples\n";
    } else if (*train_cmd || *adapt_cmd) {
      if (steps) cfg.training.steps = *steps;
      const Loaded in = load_inputs(cfg);
      TrainOptions options = cfg.training;
      fs::create_directories(out_path);
      options.checkpoint_dir = (fs::path(out_path) / "checkpoints").string();
      options.metrics_path = (fs::path(out_path) / "metrics.jsonl").string();
      options.on_record = log_record;

      Checkpoint result;
      if (*train_cmd) {
        const auto dataset = assemble_dataset(in.motions, in.graphs, cfg.augmentation, cfg.dataset_seed);
        options.eval_set = base_samples(dataset);
        Checkpoint start;
        if (!checkpoint_path.empty()) {
          start = load_checkpoint(checkpoint_path);
          if (!(start.config == cfg.model)) throw ConfigError("checkpoint model does not match the config");
        } else {
          NoiseSchedule schedule = build_schedule(cfg.schedule_steps, cfg.sigma_min, cfg.sigma_max);
          schedule.stats = dataset_stats(dataset, cfg.min_std);
          start = initial_checkpoint(cfg.model, schedule, cfg.seed);
        }
        result = train(dataset, std::move(start), cfg.guidance, options);
      } else {
        AdaptInputs inputs{in.motions, in.graphs, in.new_graphs, cfg.augmentation, cfg.dataset_seed};
        std::vector<SkeletonGraph> all = in.graphs;
        all.insert(all.end(), in.new_graphs.begin(), in.new_graphs.end());
        options.eval_set = base_samples(assemble_dataset(in.motions, all, DatasetOptions{}, cfg.dataset_seed));
        result = adapt(load_checkpoint(checkpoint_path), inputs, cfg.guidance, options, &cfg.model);
      }
      const auto model_path = (fs::path(out_path) / "model.ckpt").string();
      save_checkpoint(result, model_path);
      out << "trained to step " << result.step << ", wrote " << model_path << "\n";
    } else if (*retarget_cmd) {
      const TrainSample s = pair.load();
      const Checkpoint ckpt = load_checkpoint(checkpoint_path);
      SampleOptions options = cfg.sampling;
      if (steps) options.steps = static_cast<int>(*steps);
      const MotionClip clip = sample(s, make_denoiser(ckpt), ckpt.schedule, cfg.seed, options);
      save_clip(clip, out_path);
      out << "retargeted " << clip.frames << " frames onto '" << s.target_graph.name << "'\n";
    } else if (*baseline_cmd) {
      const TrainSample s = pair.load();
      DirectOptimizeOptions options = cfg.baseline;
      if (steps) options.steps = static_cast<int>(*steps);
      DirectOptimizeReport report;
      const MotionClip clip = direct_optimize({s.target_graph, s.reference, s.map, s.alpha}, cfg.guidance, options,
                                              &report);
      save_clip(clip, out_path);
      out << "baseline: " << report.iterations << " iterations, energy "
          << (report.energies.empty() ? 0.0 : report.energies.back()) << "\n";
    } else if (*evaluate_cmd) {
      const TrainSample s = pair.load();
      Evaluation e;
      e.embodiment = embodiment.empty() ? s.target_graph.name : embodiment;
      e.reference = fs::absolute(pair.motion).lexically_normal().string();
      e.target_graph = s.target_graph;
      e.map = s.map;
      e.alpha = s.alpha;
      for (const auto& p : preds) {
        const auto eq = p.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--pred expects label=path, got '" + p + "'");
        const std::string label = p.substr(0, eq), path = p.substr(eq + 1);
        const MotionClip clip = load_clip(path);
        e.mse[label] = evaluate_positional_mse(clip, s.target_graph, s.reference, s.map, s.alpha);
        e.predictions[label] = fs::absolute(path).lexically_normal().string();
      }
      write_json(out_path, evaluation_to_json(e));
      out << format_table_markdown({e});
    } else if (*report_cmd) {
      std::vector<Evaluation> all;
      for (const auto& path : evals) {
        json j;
        try {
          j = json::parse(detail::read_text_file(path));
        } catch (const json::parse_error& ex) {
          throw FormatError("'" + path + "': " + ex.what());
        }
        all.push_back(evaluation_from_json(j));
      }
      fs::create_directories(out_path);
      detail::write_text_file((fs::path(out_path) / "table.md").string(), format_table_markdown(all));
      detail::write_text_file((fs::path(out_path) / "table.csv").string(), format_table_csv(all));
      for (const auto& e : all) {
        std::map<std::string, MotionClip> clips;
        for (const auto& [label, path] : e.predictions) clips.emplace(label, load_clip(path));
        const auto svg = trajectory_svg(key_joint_panels(e, load_clip(e.reference), clips));
        detail::write_text_file((fs::path(out_path) / (e.embodiment + ".svg")).string(), svg);
      }
      out << format_table_markdown(all);
    }
    return 0;
  } catch (const Error& e) {
    err << "gdream: " << e.what() << "\n";
  } catch (const std::exception& e) {
    err << "gdream: unexpected error: " << e.what() << "\n";
  }
  return 1;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args(argv + std::min(argc, 1), argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace gdream
