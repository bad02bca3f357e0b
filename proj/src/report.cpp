#include "gdream/report.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "gdream/error.hpp"
#include "gdream/kinematics.hpp"

namespace gdream {

nlohmann::json evaluation_to_json(const Evaluation& e) {
  return {{"embodiment", e.embodiment},
          {"mse_cm2", e.mse},
          {"reference", e.reference},
          {"predictions", e.predictions},
          {"alpha", e.alpha},
          {"target_graph", graph_to_json(e.target_graph)},
          {"map", joint_map_to_json(e.map)}};
}

Evaluation evaluation_from_json(const nlohmann::json& j) {
  try {
    Evaluation e;
    e.embodiment = j.at("embodiment").get<std::string>();
    e.mse = j.at("mse_cm2").get<std::map<std::string, double>>();
    e.reference = j.at("reference").get<std::string>();
    e.predictions = j.at("predictions").get<std::map<std::string, std::string>>();
    e.alpha = j.at("alpha").get<double>();
    e.target_graph = graph_from_json(j.at("target_graph"));
    e.map = joint_map_from_json(j.at("map"));
    return e;
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("bad evaluation record: ") + ex.what());
  }
}

namespace {

struct Table {
  std::vector<std::string> methods;
  std::vector<std::string> embodiments;
  std::map<std::pair<std::string, std::string>, double> cells;
};

Table collect(const std::vector<Evaluation>& evaluations) {
  Table t;
  for (const auto& e : evaluations) {
    if (std::find(t.embodiments.begin(), t.embodiments.end(), e.embodiment) == t.embodiments.end()) {
      t.embodiments.push_back(e.embodiment);
    }
    for (const auto& [method, value] : e.mse) {
      if (std::find(t.methods.begin(), t.methods.end(), method) == t.methods.end()) t.methods.push_back(method);
      t.cells[{method, e.embodiment}] = value;
    }
  }
  return t;
}

std::string cell(const Table& t, const std::string& method, const std::string& embodiment) {
  const auto it = t.cells.find({method, embodiment});
  return it == t.cells.end() ? "-" : fmt::format("{:.1f}", it->second);
}

}  // namespace

std::string format_table_markdown(const std::vector<Evaluation>& evaluations) {
  const Table t = collect(evaluations);
  std::string s = "| Positional MSE / cm^2 |";
  for (const auto& e : t.embodiments) s += " " + e + " |";
  s += "\n|---|";
  for (std::size_t k = 0; k < t.embodiments.size(); ++k) s += "---:|";
  s += "\n";
  for (const auto& m : t.methods) {
    s += "| " + m + " |";
    for (const auto& e : t.embodiments) s += " " + cell(t, m, e) + " |";
    s += "\n";
  }
  return s;
}

std::string format_table_csv(const std::vector<Evaluation>& evaluations) {
  const Table t = collect(evaluations);
  std::string s = "method";
  for (const auto& e : t.embodiments) s += "," + e;
  s += "\n";
  for (const auto& m : t.methods) {
    s += m;
    for (const auto& e : t.embodiments) {
      const auto it = t.cells.find({m, e});
      s += "," + (it == t.cells.end() ? std::string() : fmt::format("{:.6g}", it->second));
    }
    s += "\n";
  }
  return s;
}

std::string trajectory_svg(const std::vector<TrajectoryPanel>& panels) {
  static const char* kColors[] = {"#222222", "#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"};
  constexpr double kWidth = 360.0, kHeight = 260.0, kMargin = 30.0;
  const double total_width = kWidth * std::max<std::size_t>(panels.size(), 1);

  std::ostringstream svg;
  svg << fmt::format(R"(<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">)",
                     total_width, kHeight + 40)
      << "\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";

  std::vector<std::string> legend;
  for (std::size_t p = 0; p < panels.size(); ++p) {
    const auto& [title, lines] = panels[p];
    double x0 = 1e300, x1 = -1e300, z0 = 1e300, z1 = -1e300;
    for (const auto& line : lines) {
      for (const auto& v : line.points) {
        x0 = std::min(x0, v.x());
        x1 = std::max(x1, v.x());
        z0 = std::min(z0, v.z());
        z1 = std::max(z1, v.z());
      }
    }
    if (x0 > x1) x0 = z0 = 0.0, x1 = z1 = 1.0;
    // Equal scale on both axes.
    const double span = std::max({x1 - x0, z1 - z0, 1e-6});
    const double scale = std::min(kWidth - 2 * kMargin, kHeight - 2 * kMargin) / span;
    const double left = p * kWidth + kMargin;
    svg << fmt::format(R"(<text x="{}" y="18">{}</text>)", left, title) << "\n";
    svg << fmt::format(R"(<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#cccccc"/>)", left, kMargin,
                       kWidth - 2 * kMargin, kHeight - 2 * kMargin)
        << "\n";
    for (std::size_t k = 0; k < lines.size(); ++k) {
      const auto& line = lines[k];
      auto found = std::find(legend.begin(), legend.end(), line.label);
      if (found == legend.end()) found = legend.insert(legend.end(), line.label);
      const char* color = kColors[(found - legend.begin()) % std::size(kColors)];
      std::string points;
      for (const auto& v : line.points) {
        points += fmt::format("{:.2f},{:.2f} ", left + (v.x() - x0) * scale, kHeight - kMargin - (v.z() - z0) * scale);
      }
      svg << fmt::format(R"(<polyline fill="none" stroke="{}" stroke-width="1.5"{} points="{}"/>)", color,
                         line.dashed ? R"( stroke-dasharray="4 3")" : "", points)
          << "\n";
    }
  }
  for (std::size_t k = 0; k < legend.size(); ++k) {
    svg << fmt::format(R"(<text x="{}" y="{}" fill="{}">{}</text>)", kMargin + 110.0 * k, kHeight + 25,
                       kColors[k % std::size(kColors)], legend[k])
        << "\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

std::vector<TrajectoryPanel> key_joint_panels(const Evaluation& evaluation, const MotionClip& reference,
                                              const std::map<std::string, MotionClip>& predictions) {
  const auto ref = scaled_reference_positions(reference, evaluation.alpha);
  std::vector<TrajectoryPanel> panels;
  for (const auto& [label, pred] : predictions) {
    if (pred.joints < evaluation.target_graph.joint_count()) {
      throw ShapeError("prediction '" + label + "' has fewer joints than the target graph");
    }
    std::vector<PoseState> poses;
    std::vector<int> frames;
    for (int t = 0; t < pred.frames; ++t) {
      if (!pred.frame_valid[t] || t >= reference.frames || !reference.frame_valid[t]) continue;
      poses.push_back(pose_from_clip(pred, t, evaluation.target_graph.joint_count()));
      frames.push_back(t);
    }
    const auto fk = forward_kinematics(poses, evaluation.target_graph);
    TrajectoryPanel panel{label, {}};
    for (const auto& pair : evaluation.map.active_pairs()) {
      Trajectory want{"reference", {}, true};
      Trajectory got{label, {}, false};
      for (std::size_t k = 0; k < frames.size(); ++k) {
        want.points.push_back(ref[frames[k]][pair.source]);
        got.points.push_back(fk[k][pair.target]);
      }
      panel.second.push_back(std::move(want));
      panel.second.push_back(std::move(got));
    }
    panels.push_back(std::move(panel));
  }
  return panels;
}

}  // namespace gdream
