#include <doctest.h>

#include "fixtures.hpp"
#include "gdream/error.hpp"
#include "gdream/guidance.hpp"
#include "gdream/kinematics.hpp"

using namespace gdream;
using namespace gdream::testing;

namespace {

JointMap single_pair(int source_count, int target_count, int source, int target) {
  return JointMap{source_count, target_count, {{"LeftKnee", source, target}}};
}

MotionClip static_clip(const SkeletonGraph& graph, int frames) {
  std::vector<PoseState> poses(frames, PoseState::zero(graph.joint_count()));
  for (auto& pose : poses) pose.base_position = Vec3(0, 0, 0.9);
  return clip_from_poses(poses, graph, 30.0);
}

// Scales the base position lanes and re-runs FK.
MotionClip posed_like(const MotionClip& ref, const SkeletonGraph& graph, double alpha) {
  MotionClip out = ref;
  for (int t = 0; t < ref.frames; ++t) out.set_position(t, 0, alpha * ref.position(t, 0));
  return with_fk_lanes(out, graph);
}

}  // namespace

TEST_CASE("L_similar") {
  const auto g = make_biped("b");
  const auto ref = static_clip(g, 1);
  const auto map = single_pair(9, 9, 2, 2);
  const GuidanceTarget target{g, ref, map, 1.0};

  CHECK(loss_similar(ref, target, 100.0) == 0.0);

  MotionClip shifted = ref;
  shifted.at(0, 0, lane::kBasePosition) += 0.1;
  CHECK(loss_similar(shifted, target, 100.0) == doctest::Approx(1.0).epsilon(1e-12));

  // Twice-sized skeleton posed by the same angles hits the 2x scaled points.
  std::map<int, double> twice;
  for (int j = 1; j < g.joint_count(); ++j) twice[j] = 2.0;
  const auto big = scale_links(g, twice);
  const double alpha = scaling_factor(big, g);
  CHECK(alpha == 2.0);
  const auto moving = wave_clip(g, 8, 4);
  const auto full = build_joint_map(g, big);
  const MotionClip pred = posed_like(moving, big, alpha);
  CHECK(loss_similar(pred, {big, moving, full, alpha}, 100.0) == 0.0);
  CHECK(loss_similar(pred, {big, moving, full, 1.0}, 100.0) > 1.0);

  bool empty = false;
  const JointMap none{9, 9, {}};
  CHECK(loss_similar(shifted, {g, ref, none, 1.0}, 100.0, &empty) == 0.0);
  CHECK(empty);
  loss_similar(shifted, target, 100.0, &empty);
  CHECK_FALSE(empty);
}

TEST_CASE("L_similar skips invalid frames and reference joints") {
  const auto g = make_biped("b");
  auto ref = static_clip(g, 2);
  MotionClip pred = ref;
  pred.at(1, 0, lane::kBasePosition) += 0.1;
  const auto map = single_pair(9, 9, 2, 2);
  CHECK(loss_similar(pred, {g, ref, map, 1.0}, 1.0) == doctest::Approx(0.01));
  ref.frame_valid[1] = 0;
  CHECK(loss_similar(pred, {g, ref, map, 1.0}, 1.0) == 0.0);
  ref.frame_valid[1] = 1;
  ref.joint_valid[2] = 0;
  CHECK(loss_similar(pred, {g, ref, map, 1.0}, 1.0) == 0.0);
}

TEST_CASE("L_cst") {
  const auto g = make_biped("b");
  const auto clip = wave_clip(g, 5, 2);
  CHECK(loss_cst(clip, g, 1.0) == 0.0);

  MotionClip off = clip;
  off.at(3, 6, lane::kPosition) += 0.2;
  CHECK(loss_cst(off, g, 1.0) == doctest::Approx(0.04).epsilon(1e-12));
  off.frame_valid[3] = 0;
  CHECK(loss_cst(off, g, 1.0) == 0.0);

  // Zero pose: stored positions are cumulative link sums.
  MotionClip zero = MotionClip::zeros(1, g.joint_count(), 30.0, g.name);
  for (int j = 1; j < g.joint_count(); ++j) {
    zero.set_position(0, j, zero.position(0, g.parent_index[j]) + g.link_vectors[j]);
  }
  CHECK(loss_cst(zero, g, 1.0) == 0.0);
}

TEST_CASE("L_vel") {
  const auto g = make_biped("b");
  const auto ref = static_clip(g, 3);
  const auto map = single_pair(9, 9, 2, 2);
  CHECK(loss_vel(ref, {g, ref, map, 1.0}, 900.0) == 0.0);

  MotionClip pred = ref;
  pred.at(2, 0, lane::kBasePosition + 1) += 0.01;
  // Frame 2 moves +0.01 relative to frame 1 only.
  CHECK(loss_vel(pred, {g, ref, map, 1.0}, 900.0) == doctest::Approx(0.09).epsilon(1e-9));

  // Rigid translation of a perfect solution keeps every frame delta.
  const auto moving = wave_clip(g, 6, 9);
  MotionClip translated = moving;
  for (int t = 0; t < moving.frames; ++t) {
    translated.set_position(t, 0, moving.position(t, 0) + Vec3(0.3, -0.7, 0.25));
  }
  const auto full = build_joint_map(g, g);
  CHECK(loss_vel(translated, {g, moving, full, 1.0}, 900.0) < 1e-24);
  CHECK(loss_similar(translated, {g, moving, full, 1.0}, 100.0) > 1.0);

  const auto one = static_clip(g, 1);
  CHECK(loss_vel(one, {g, one, map, 1.0}, 900.0) == 0.0);
}

TEST_CASE("L_norm") {
  const auto g = make_biped("b");
  const auto still = static_clip(g, 4);
  CHECK(loss_norm(still, g, 1.0) < 1e-6);
  CHECK(loss_norm(still, g, 1.0) > 0.0);

  MotionClip bent = static_clip(g, 1);
  bent.at(0, 3, lane::kAngle) = 0.5;
  CHECK(loss_norm(bent, g, 1.0) == doctest::Approx(0.5).epsilon(1e-7));

  // Angle norms are per joint trajectory: sqrt(0.3^2 + 0.4^2) = 0.5.
  MotionClip two = static_clip(g, 2);
  two.at(0, 3, lane::kAngle) = 0.3;
  two.at(1, 3, lane::kAngle) = 0.4;
  const double fk_part = [&] {
    const auto f0 = forward_kinematics(pose_from_clip(two, 0, 9), g);
    const auto f1 = forward_kinematics(pose_from_clip(two, 1, 9), g);
    double s = 0.0;
    for (int j = 0; j < 9; ++j) s += (f1.positions[j] - f0.positions[j]).norm();
    return s;
  }();
  CHECK(loss_norm(two, g, 1.0) == doctest::Approx(0.5 + fk_part).epsilon(1e-7));

  // FK frame differences are not linear in the angles.
  const auto moving = wave_clip(g, 6, 3, 0.4);
  MotionClip doubled = moving;
  for (int t = 0; t < moving.frames; ++t) {
    for (int j = 1; j < 9; ++j) doubled.at(t, j, lane::kAngle) *= 2.0;
  }
  auto delta_part = [&](const MotionClip& c) {
    double angles = 0.0;
    for (int j = 1; j < 9; ++j) {
      double s = 0.0;
      for (int t = 0; t < c.frames; ++t) s += c.at(t, j, lane::kAngle) * c.at(t, j, lane::kAngle);
      angles += std::sqrt(s + 1e-16);
    }
    return loss_norm(c, g, 1.0) - angles;
  };
  CHECK(std::abs(delta_part(doubled) - 2.0 * delta_part(moving)) > 1e-3);
}

TEST_CASE("f_kin breakdown") {
  const auto g = make_biped("b");
  const auto moving = wave_clip(g, 6, 5);
  const auto full = build_joint_map(g, g);
  const GuidanceWeights w;
  const auto perfect = f_kin_energy(moving, {g, moving, full, 1.0}, w);
  CHECK(perfect.similar == 0.0);
  CHECK(perfect.cst == 0.0);
  CHECK(perfect.vel == 0.0);
  CHECK(perfect.total == perfect.norm);

  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = random_guidance_problem(rng);
    const auto e = f_kin_energy(p.pred, {p.target, p.reference, p.map, p.alpha}, w);
    CHECK(e.total == e.similar + e.cst + e.vel + e.norm);
    CHECK(e.similar == loss_similar(p.pred, {p.target, p.reference, p.map, p.alpha}, w.similar));
    CHECK(e.cst == loss_cst(p.pred, p.target, w.consistency));
    CHECK(e.vel == loss_vel(p.pred, {p.target, p.reference, p.map, p.alpha}, w.velocity));
    CHECK(e.norm == loss_norm(p.pred, p.target, w.norm));
  }
}

TEST_CASE("f_kin gradient matches central differences") {
  Rng rng(23);
  const GuidanceWeights w;
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const auto p = random_guidance_problem(rng, 3);
    const GuidanceTarget target{p.target, p.reference, p.map, p.alpha};
    std::vector<double> grad;
    f_kin_energy_with_gradient(p.pred, target, w, grad);
    REQUIRE(grad.size() == p.pred.data.size());
    std::vector<double> fd(grad.size());
    MotionClip probe = p.pred;
    for (std::size_t k = 0; k < grad.size(); ++k) {
      const double keep = probe.data[k];
      const double h = 1e-6;
      probe.data[k] = keep + h;
      const double up = f_kin_energy(probe, target, w).total;
      probe.data[k] = keep - h;
      const double down = f_kin_energy(probe, target, w).total;
      probe.data[k] = keep;
      fd[k] = (up - down) / (2.0 * h);
    }
    worst = std::max(worst, vector_relative_error(grad, fd));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("joints outside the map only touch L_cst and L_norm") {
  const auto g = make_biped("b");
  const auto moving = wave_clip(g, 5, 6);
  JointMap map = build_joint_map(g, g);
  std::erase_if(map.pairs, [](const JointPair& p) { return p.semantic == "LeftToe" || p.semantic == "LeftAnkle"; });
  // The ankle angle moves only the unmapped toe.
  const int ankle = g.key_joint("LeftAnkle");
  MotionClip pred = moving;
  pred.at(2, ankle, lane::kAngle) += 0.7;
  const GuidanceTarget target{g, moving, map, 1.0};
  const GuidanceWeights w;
  const auto before = f_kin_energy(moving, target, w);
  const auto after = f_kin_energy(pred, target, w);
  CHECK(after.similar == before.similar);
  CHECK(after.vel == before.vel);
  CHECK(after.cst > before.cst);
  CHECK(after.norm != before.norm);
}

TEST_CASE("energies are nonnegative") {
  Rng rng(31);
  const GuidanceWeights w;
  for (int trial = 0; trial < 200; ++trial) {
    const auto p = random_guidance_problem(rng, 1 + static_cast<int>(rng.index(4)));
    const auto e = f_kin_energy(p.pred, {p.target, p.reference, p.map, p.alpha}, w);
    CHECK(e.similar >= 0.0);
    CHECK(e.cst >= 0.0);
    CHECK(e.vel >= 0.0);
    CHECK(e.norm >= 0.0);
  }
}

TEST_CASE("energy argument checks") {
  const auto g = make_biped("b");
  const auto ref = static_clip(g, 3);
  const auto short_ref = static_clip(g, 2);
  const auto map = build_joint_map(g, g);
  const GuidanceWeights w;
  CHECK_THROWS_AS(f_kin_energy(ref, {g, short_ref, map, 1.0}, w), ShapeError);
  CHECK_THROWS_AS(f_kin_energy(ref, {g, ref, map, 0.0}, w), DomainError);
  const auto bigger = make_humanoid("h");
  CHECK_THROWS_AS(loss_cst(ref, bigger, 1.0), ShapeError);
  GuidanceWeights bad;
  bad.velocity = -1.0;
  CHECK_THROWS_AS(f_kin_energy(ref, {g, ref, map, 1.0}, bad), ConfigError);
}

TEST_CASE("direct optimization on an isomorphic pair") {
  const auto small = make_biped("small");
  const auto big = make_biped("big", 0.8, 0.8, 0.2, 0.2);
  const auto ref = wave_clip(small, 12, 8, 0.4);
  const auto map = build_joint_map(small, big);
  const double alpha = scaling_factor(big, small);
  const GuidanceTarget target{big, ref, map, alpha};
  const GuidanceWeights w;
  DirectOptimizeReport report;
  const MotionClip out = direct_optimize(target, w, {3000, 1e-3}, &report);

  CHECK(loss_cst(out, big, 1.0) == 0.0);
  for (std::size_t k = 1; k < report.energies.size(); ++k) {
    CHECK(report.energies[k] <= report.energies[k - 1]);
  }
  const double per_term = loss_similar(out, target, 1.0) /
                          static_cast<double>(map.active_pairs().size() * ref.frames);
  CHECK(per_term < 1e-4);
  CHECK(report.energies.back() < 1e-2 * report.energies.front());

  DirectOptimizeReport again;
  const MotionClip repeat = direct_optimize(target, w, {3000, 1e-3}, &again);
  CHECK(repeat.data == out.data);
  CHECK(again.energies == report.energies);
}

TEST_CASE("direct optimization with an empty map relaxes the angles") {
  const auto g = make_biped("b");
  const auto ref = wave_clip(g, 6, 2);
  const JointMap none{9, 9, {}};
  const GuidanceTarget target{g, ref, none, 1.0};
  DirectOptimizeReport report;
  const MotionClip out = direct_optimize(target, GuidanceWeights{}, {2000, 1e-3}, &report);
  CHECK(loss_similar(out, target, 100.0) == 0.0);
  CHECK(loss_vel(out, target, 900.0) == 0.0);
  CHECK(loss_norm(out, g, 1.0) < 0.2 * loss_norm(with_fk_lanes(ref, g), g, 1.0));
  // Angles start at zero; the smoothed norms keep them there up to a small drift.
  double biggest = 0.0;
  for (int t = 0; t < out.frames; ++t) {
    for (int j = 1; j < 9; ++j) biggest = std::max(biggest, std::abs(out.at(t, j, lane::kAngle)));
  }
  CHECK(biggest < 5e-3);
}

TEST_CASE("direct optimization checks its options") {
  const auto g = make_biped("b");
  const auto ref = static_clip(g, 2);
  const auto map = build_joint_map(g, g);
  CHECK_THROWS_AS(direct_optimize({g, ref, map, 1.0}, {}, {-1, 1e-3}), ConfigError);
  CHECK_THROWS_AS(direct_optimize({g, ref, map, 1.0}, {}, {10, 0.0}), ConfigError);
  const auto zero_steps = direct_optimize({g, ref, map, 1.0}, {}, {0, 1e-3});
  CHECK(zero_steps.frames == 2);
}
