#include <doctest.h>

#include "fixtures.hpp"
#include "gdream/error.hpp"
#include "gdream/skeleton.hpp"

using namespace gdream;
using gdream::testing::make_biped;
using gdream::testing::make_humanoid;

namespace {

Eigen::MatrixXi matrix(std::initializer_list<std::initializer_list<int>> rows) {
  Eigen::MatrixXi m(static_cast<int>(rows.size()), static_cast<int>(rows.begin()->size()));
  int r = 0;
  for (const auto& row : rows) {
    int c = 0;
    for (int v : row) m(r, c++) = v;
    ++r;
  }
  return m;
}

// Enumerates the relation of every ordered pair straight from the definition.
Eigen::MatrixXi relation_by_definition(const std::vector<int>& parents) {
  const int n = static_cast<int>(parents.size());
  Eigen::MatrixXi m(n, n);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i == j) m(i, j) = 1;
      else if (parents[j] == i) m(i, j) = 2;
      else if (parents[i] == j) m(i, j) = 3;
      else m(i, j) = 0;
    }
  }
  return m;
}

}  // namespace

TEST_CASE("relation matrix of small trees") {
  CHECK(build_relation_matrix(std::vector<int>{-1, 0, 1}) == matrix({{1, 2, 0}, {3, 1, 2}, {0, 3, 1}}));
  CHECK(build_relation_matrix(std::vector<int>{-1}) == matrix({{1}}));
  const auto star = build_relation_matrix(std::vector<int>{-1, 0, 0});
  CHECK(star(1, 2) == 0);
  CHECK(star(2, 1) == 0);
  CHECK(star(0, 1) == 2);
  CHECK(star(2, 0) == 3);
}

TEST_CASE("relation matrix matches the pairwise definition on random trees") {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + static_cast<int>(rng.index(12));
    std::vector<int> parents{-1};
    for (int j = 1; j < n; ++j) parents.push_back(static_cast<int>(rng.index(j)));
    const auto psi = build_relation_matrix(parents);
    CHECK(psi == relation_by_definition(parents));
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        if (psi(i, j) == 2) CHECK(psi(j, i) == 3);
      }
    }
  }
}

TEST_CASE("relation matrix rejects cycles and extra roots") {
  CHECK_THROWS_AS(build_relation_matrix(std::vector<int>{-1, 2, 1}), StructureError);
  CHECK_THROWS_AS(build_relation_matrix(std::vector<int>{-1, 0, -1}), StructureError);
  CHECK_THROWS_AS(build_relation_matrix(std::vector<int>{0, 0}), StructureError);
}

TEST_CASE("joint map between humanoids pairs every semantic") {
  const auto a = make_humanoid("a");
  const auto b = make_humanoid("b", 0.5, 0.5);
  const auto map = build_joint_map(a, b);
  const auto eta = map.eta();
  CHECK(map.active_pairs().size() == 14);
  for (const auto& [semantic, index] : a.key_joints) {
    CHECK(eta.row(index).sum() == 1);
    CHECK(eta.col(b.key_joint(semantic)).sum() == 1);
  }
  CHECK(eta.sum() == 14);
}

TEST_CASE("joint map from humanoid to biped keeps only the lower body") {
  const auto human = make_humanoid("h");
  const auto biped = make_biped("b");
  const auto map = build_joint_map(human, biped);
  for (const auto& pair : map.pairs) {
    const auto stem = base_semantic(pair.semantic);
    const bool upper = stem == "Shoulder" || stem == "Elbow" || stem == "Hand";
    CHECK(pair.active() == !upper);
  }
  CHECK(map.eta().sum() == 8);
}

TEST_CASE("joint map with no key joints on one side is empty") {
  auto src = make_humanoid("h");
  for (auto& [semantic, index] : src.key_joints) index = -1;
  const auto map = build_joint_map(src, make_humanoid("x"));
  CHECK(map.eta().sum() == 0);
  CHECK(map.active_pairs().empty());
}

TEST_CASE("temporal extension of joint maps") {
  const auto human = make_humanoid("h");
  const auto biped = make_biped("b");
  const auto map = build_joint_map(human, biped);
  CHECK(extend_joint_map(map, 1) == map.eta().transpose());

  JointMap identity{2, 2, {{"Hip", 0, 0}, {"Knee", 1, 1}}};
  Eigen::MatrixXi expected = Eigen::MatrixXi::Identity(4, 4);
  CHECK(extend_joint_map(identity, 2) == expected);

  JointMap empty{3, 2, {{"Hip", -1, 0}}};
  CHECK(extend_joint_map(empty, 4).sum() == 0);

  for (int frames : {1, 3, 7}) {
    const auto extended = extend_joint_map(map, frames);
    CHECK(extended.rows() == frames * biped.joint_count());
    CHECK(extended.cols() == frames * human.joint_count());
    CHECK(extended.sum() == frames * map.eta().sum());
  }
  CHECK_THROWS_AS(extend_joint_map(map, 0), DomainError);
}

TEST_CASE("skeleton augmentation") {
  const auto g = make_humanoid("h");
  SUBCASE("pinned unit scale is the identity") {
    AugmentationPolicy unit{1.0, 1.0, 1.0, 1.0};
    CHECK(augment_skeleton(g, 3, unit) == g);
  }
  SUBCASE("calf doubling") {
    const int calf = g.key_joint("LeftAnkle");
    const auto scaled = scale_links(g, {{calf, 2.0}});
    CHECK(scaled.link_vectors[calf].norm() == 2.0 * g.link_vectors[calf].norm());
    CHECK((scaled.link_vectors[calf].normalized() - g.link_vectors[calf].normalized()).norm() < 1e-15);
  }
  SUBCASE("determinism and preserved structure") {
    const AugmentationPolicy policy;
    const auto a = augment_skeleton(g, 42, policy);
    CHECK(a == augment_skeleton(g, 42, policy));
    CHECK_FALSE(a == augment_skeleton(g, 43, policy));
    CHECK(a.parent_index == g.parent_index);
    CHECK(a.relation == g.relation);
    CHECK(a.axes == g.axes);
    CHECK(a.key_joints == g.key_joints);
    const auto key_links = g.resolved_key_links();
    CHECK(key_links.size() == 4);
    for (int j = 1; j < g.joint_count(); ++j) {
      const double ratio = a.link_vectors[j].norm() / g.link_vectors[j].norm();
      const bool key = std::find(key_links.begin(), key_links.end(), j) != key_links.end();
      CHECK(ratio >= (key ? 0.5 : 0.67) - 1e-12);
      CHECK(ratio <= (key ? 2.0 : 1.5) + 1e-12);
      CHECK((a.link_vectors[j].normalized() - g.link_vectors[j].normalized()).norm() < 1e-12);
    }
  }
  SUBCASE("invalid ranges") {
    CHECK_THROWS_AS(augment_skeleton(g, 1, AugmentationPolicy{0.0, 2.0, 0.67, 1.5}), ConfigError);
    CHECK_THROWS_AS(augment_skeleton(g, 1, AugmentationPolicy{0.5, 2.0, -1.0, 1.5}), ConfigError);
  }
}

TEST_CASE("correspondence augmentation") {
  const auto map = build_joint_map(make_humanoid("a"), make_humanoid("b"));
  CHECK(augment_correspondence(map, 5, 0.0) == map);
  const auto dropped = augment_correspondence(map, 5, 1.0);
  for (const auto& pair : dropped.pairs) CHECK(pair.active() == is_end_effector(pair.semantic));
  CHECK(dropped.active_pairs().size() == 4);
  CHECK(augment_correspondence(map, 9, 0.5) == augment_correspondence(map, 9, 0.5));
  CHECK_THROWS_AS(augment_correspondence(map, 1, 1.5), ConfigError);
  CHECK_THROWS_AS(augment_correspondence(map, 1, -0.1), ConfigError);
}

TEST_CASE("graph and joint-map json round trip") {
  const auto g = make_humanoid("h");
  CHECK(graph_from_json(nlohmann::json::parse(graph_to_json(g).dump())) == g);
  const auto map = build_joint_map(g, make_biped("b"));
  CHECK(joint_map_from_json(nlohmann::json::parse(joint_map_to_json(map).dump())) == map);

  auto bad = graph_to_json(g);
  bad["relation_matrix"][0][1] = 3;
  CHECK_THROWS_AS(graph_from_json(bad), StructureError);
  auto missing = graph_to_json(g);
  missing.erase("axes");
  CHECK_THROWS_AS(graph_from_json(missing), FormatError);
}

TEST_CASE("key joint validation") {
  auto g = make_biped("b");
  CHECK(g.key_joint("LeftKnee") == 2);
  CHECK(g.key_joint("Hand") == -1);
  g.key_joints["LeftToe"] = g.key_joint("LeftAnkle");
  CHECK_THROWS_AS(g.validate(), DomainError);
  auto bare = make_biped("b");
  bare.key_joints.clear();
  CHECK_THROWS_AS(with_key_joints(bare, {{"Knee", "missing"}}), ConfigError);
  CHECK_THROWS_AS(with_key_joints(bare, {{"Nose", "Left_knee"}}), ConfigError);
  const auto named = with_key_joints(bare, {{"Knee", "Left_knee"}, {"Hand", ""}});
  CHECK(named.key_joint("Knee") == 2);
  CHECK(named.key_joint("Hand") == -1);
}
