#pragma once

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "gdream/motion.hpp"
#include "gdream/skeleton.hpp"

namespace gdream {

/// One `evaluate` result: positional MSE (cm^2) of several methods on one
/// embodiment. Carries the target graph and joint map so that plots can be
/// drawn from the clip files alone.
struct Evaluation {
  std::string embodiment;
  std::map<std::string, double> mse;
  std::string reference;
  /// Method label -> predicted clip file.
  std::map<std::string, std::string> predictions;
  SkeletonGraph target_graph;
  JointMap map;
  double alpha = 1.0;
};

nlohmann::json evaluation_to_json(const Evaluation& e);
Evaluation evaluation_from_json(const nlohmann::json& j);

/// Rows are methods, columns embodiments, values with one decimal. Missing
/// cells are "-".
std::string format_table_markdown(const std::vector<Evaluation>& evaluations);
std::string format_table_csv(const std::vector<Evaluation>& evaluations);

/// A named 3D polyline.
struct Trajectory {
  std::string label;
  std::vector<Vec3> points;
  bool dashed = false;
};

using TrajectoryPanel = std::pair<std::string, std::vector<Trajectory>>;

/// Static side view (x forward, z up) of the trajectories, one panel per
/// title.
std::string trajectory_svg(const std::vector<TrajectoryPanel>& panels);

/// One panel per prediction: FK key-joint paths of the prediction against the
/// scaled reference (dashed).
std::vector<TrajectoryPanel> key_joint_panels(const Evaluation& evaluation, const MotionClip& reference,
                                              const std::map<std::string, MotionClip>& predictions);

}  // namespace gdream
