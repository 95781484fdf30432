#include <cstdio>
#include <random>
#include <set>

#include "doctest.h"
#include "pmp/errors.hpp"
#include "pmp/taxonomy.hpp"

using namespace pmp;
using taxonomy::Level;

namespace {

taxonomy::Taxonomy toy() {
  return taxonomy::Taxonomy({
      {"tomato_early_blight", "fungal", "leaf_spot", "early_blight"},
      {"corn_rust", "fungal", "pustule", "common_rust"},
      {"tomato_mosaic", "viral", "mottle", "mosaic"},
      {"pepper_bacterial_spot", "bacterial", "water_soaked", "bacterial_spot"},
  });
}

// One-way ANOVA F for each merge level, evaluated from scratch.
Level brute_level(const std::vector<double>& a, const std::vector<int>& ids, const taxonomy::Taxonomy& t) {
  double best = -1.0;
  Level best_level = Level::Fine;
  for (int lv = 2; lv >= 0; --lv) {
    std::map<std::string, std::vector<double>> groups;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const auto& c = t.at(ids[i]);
      groups[lv == 0 ? c.coarse : lv == 1 ? c.medium : c.fine].push_back(a[i]);
    }
    const double k = groups.size();
    if (k < 2) continue;
    double mean = 0;
    for (double x : a) mean += x;
    mean /= a.size();
    double between = 0, within = 0;
    for (auto& [g, xs] : groups) {
      double m = 0;
      for (double x : xs) m += x;
      m /= xs.size();
      between += xs.size() * (m - mean) * (m - mean);
      for (double x : xs) within += (x - m) * (x - m);
    }
    const double f = (between / (k - 1)) / (within / (a.size() - k));
    if (best < 0 || f > best + 1e-12 * best) {
      best = f;
      best_level = static_cast<Level>(lv);
    }
  }
  return best_level;
}

}  // namespace

TEST_CASE("taxonomy distance rules") {
  auto t = toy();
  CHECK(t.distance("tomato_early_blight", "tomato_early_blight") == 0);
  CHECK(t.distance("tomato_early_blight", "corn_rust") == 1);
  CHECK(t.distance("corn_rust", "tomato_mosaic") == 2);
  CHECK_THROWS_AS(t.distance("corn_rust", "apple_scab"), LookupError);
  CHECK_THROWS_AS(t.distance(0, 7), LookupError);
}

TEST_CASE("property: distance is symmetric, zero on the diagonal and within {0,1,2}") {
  auto t = toy();
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      CHECK(t.distance(i, j) == t.distance(j, i));
      CHECK(t.distance(i, j) >= 0);
      CHECK(t.distance(i, j) <= 2);
      if (i == j) CHECK(t.distance(i, j) == 0);
    }
}

TEST_CASE("hierarchy must be a tree with unique fine labels") {
  CHECK_THROWS_AS(taxonomy::Taxonomy({{"a", "fungal", "spot", "x"}, {"b", "viral", "spot", "y"}}), StructuralError);
  CHECK_THROWS_AS(taxonomy::Taxonomy({{"a", "fungal", "spot", "x"}, {"b", "fungal", "spot", "x"}}), StructuralError);
  CHECK_THROWS_AS(taxonomy::Taxonomy({{"a", "fungal", "", "x"}}), StructuralError);
}

TEST_CASE("JSON round trip") {
  auto t = toy();
  const std::string path = "test_taxonomy_roundtrip.json";
  taxonomy::save_taxonomy(t, path);
  auto back = taxonomy::load_taxonomy(path);
  std::remove(path.c_str());
  CHECK(taxonomy::taxonomy_to_json(back) == taxonomy::taxonomy_to_json(t));
  CHECK(back.distance("corn_rust", "tomato_early_blight") == 1);
  CHECK_THROWS_AS(taxonomy::taxonomy_from_json(nlohmann::json{{"a", {"x", "y"}}}), ConfigError);
}

TEST_CASE("level grouping") {
  auto t = toy();
  CHECK(t.group_count(Level::Coarse) == 3);
  CHECK(t.group_count(Level::Medium) == 4);
  CHECK(t.group_count(Level::Fine) == 4);
  auto g = t.groups(Level::Coarse);
  CHECK(g[0] == g[1]);
  CHECK(g[0] != g[2]);
}

TEST_CASE("attribution matches a brute-force level enumeration") {
  auto t = toy();
  std::mt19937_64 rng(17);
  std::normal_distribution<double> nd(0.0, 1.0);
  const auto coarse = t.groups(Level::Coarse);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 40;
    Eigen::MatrixXd a(n, 3);
    std::vector<int> ids(n);
    for (int i = 0; i < n; ++i) {
      ids[i] = i % 4;
      a(i, 0) = 3.0 * coarse[ids[i]] + 0.3 * nd(rng);
      a(i, 1) = 2.0 * ids[i] + 0.3 * nd(rng);
      a(i, 2) = nd(rng);
    }
    auto levels = taxonomy::attribute_channels(a, ids, t);
    for (int c = 0; c < 3; ++c) {
      std::vector<double> col(a.col(c).data(), a.col(c).data() + n);
      CHECK(levels[c] == brute_level(col, ids, t));
    }
    CHECK(levels[0] == Level::Coarse);
  }
}

TEST_CASE("protection multipliers") {
  auto t = toy();
  taxonomy::Attribution attr = {{"conv1", {0, 1, 2}, {Level::Coarse, Level::Medium, Level::Fine}}};
  auto m = taxonomy::protection_factor(t, attr);
  CHECK(m["conv1"] == std::vector<double>{2.0, 1.5, 1.0});

  taxonomy::Attribution fine = {{"conv1", {0, 1}, {Level::Fine, Level::Fine}}};
  CHECK(taxonomy::protection_factor(t, fine)["conv1"] == std::vector<double>{1.0, 1.0});

  // Tied raw scores: the coarse-attributed channel ranks strictly higher.
  const double raw = 0.4;
  CHECK(raw * m["conv1"][0] > raw * m["conv1"][2]);

  t.policy[Level::Coarse] = taxonomy::Policy::None;
  CHECK(taxonomy::protection_factor(t, attr)["conv1"][0] == 1.0);
}
