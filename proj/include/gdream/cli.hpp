#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "gdream/denoiser.hpp"
#include "gdream/diffusion.hpp"
#include "gdream/guidance.hpp"
#include "gdream/pipeline.hpp"
#include "gdream/skeleton.hpp"

namespace gdream {

/// A skeleton source: a graph file (.json) or a URDF with optional key-joint
/// sidecar.
struct GraphSource {
  std::string path;
  std::string key_joints;
  /// Overrides the graph name when non-empty.
  std::string name;
};

/// Settings of one CLI run, read from a JSON config file. Relative paths are
/// resolved against the config file's directory. Defaults are the full-scale
/// training values.
struct RunConfig {
  std::vector<GraphSource> graphs;
  std::vector<GraphSource> new_graphs;
  /// Motion clip files; each names its skeleton.
  std::vector<std::string> motions;

  DenoiserConfig model;
  int schedule_steps = 1000;
  double sigma_min = 0.01;
  double sigma_max = 10.0;
  double min_std = NormalizationStats::kDefaultMinStd;
  GuidanceWeights guidance;
  DatasetOptions augmentation;
  std::uint64_t dataset_seed = 0;
  TrainOptions training;
  SampleOptions sampling{50, true};
  DirectOptimizeOptions baseline;
  std::uint64_t seed = 0;

  /// Throws ConfigError on invalid values or missing files.
  void validate() const;
};

RunConfig parse_run_config(const nlohmann::json& j, const std::string& base_dir = ".");
RunConfig load_run_config(const std::string& path);

SkeletonGraph load_graph_source(const GraphSource& source);

/// Entry point of the `gdream` tool. Returns the process exit status: 0 on
/// success, 1 on a runtime error, 2 on a usage error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace gdream
