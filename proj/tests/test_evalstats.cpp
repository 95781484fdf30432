#include <cmath>
#include <random>

#include "doctest.h"
#include "pmp/errors.hpp"
#include "pmp/evalstats.hpp"

using namespace pmp;

namespace {

net::ActivationRecord synthetic(int channels, int samples, int classes, std::uint64_t seed, bool cauchy) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::cauchy_distribution<double> cd;
  net::ActivationRecord r;
  net::LayerActivations l;
  l.layer = "conv1";
  l.pooled.resize(samples, channels);
  for (int c = 0; c < channels; ++c) {
    l.channels.push_back(c);
    for (int i = 0; i < samples; ++i) l.pooled(i, c) = cauchy ? cd(rng) : nd(rng);
  }
  for (int i = 0; i < samples; ++i) r.labels.push_back(i % classes);
  r.layers.push_back(l);
  return r;
}

}  // namespace

TEST_CASE("deployment metric examples") {
  CHECK(stats::des(100, 1, 1, 1) == 100.0);
  CHECK(stats::des(100, 2, 1, 1) == 200.0);
  CHECK(stats::des(100, 1, 2, 1) == 50.0);
  CHECK(stats::des(83.2, 22.2, 2.19, 0.38) == doctest::Approx(2219.6).epsilon(1e-4));
  CHECK(stats::des(3 * 83.2, 22.2, 2.19, 0.38) == doctest::Approx(3 * stats::des(83.2, 22.2, 2.19, 0.38)));
  CHECK_THROWS_AS(stats::des(80, 1, 0, 1), ArgumentError);
  CHECK_THROWS_AS(stats::des(80, 1, 1, -1), ArgumentError);

  CHECK(stats::fsi({0.8, 0.8, 0.8}) == 1.0);
  CHECK(stats::fsi({0.8 - 0.064, 0.8 + 0.064}) == doctest::Approx(0.92));
  CHECK_THROWS_AS(stats::fsi({0.0, 0.0}), ArgumentError);

  CHECK(stats::csg(70, 70) == 1.0);
  CHECK(stats::csg(82.8, 68.7) == doctest::Approx(0.8297).epsilon(1e-4));
  CHECK(stats::csg(82.8, 0) == 0.0);
  CHECK_THROWS_AS(stats::csg(0, 1), ArgumentError);
}

TEST_CASE("property: FSI never exceeds one") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> v(2 + t % 10);
    for (auto& x : v) x = u(rng);
    CHECK(stats::fsi(v) <= 1.0);
  }
}

TEST_CASE("summary confidence interval") {
  auto s = stats::summarize({1.0, 1.0, 1.0});
  CHECK(s.sd == 0.0);
  CHECK(s.ci_high - s.ci_low == 0.0);
  // mean 96.6, sd 2.3, n 1000 gives +/- 0.1426
  std::vector<double> v;
  for (int i = 0; i < 500; ++i) {
    v.push_back(96.6 - 2.3);
    v.push_back(96.6 + 2.3);
  }
  s = stats::summarize(v);
  CHECK(s.sd == doctest::Approx(2.3));
  CHECK(s.ci_low == doctest::Approx(96.46).epsilon(1e-4));
  CHECK(s.ci_high == doctest::Approx(96.74).epsilon(1e-4));
}

TEST_CASE("episodic evaluation of trivial classifiers") {
  data::Dataset d;
  d.height = d.width = 1;
  for (int c = 0; c < 10; ++c) d.class_names.push_back("c" + std::to_string(c));
  d.data.resize(3, 200);
  d.data.setZero();
  for (int i = 0; i < 200; ++i) {
    d.labels.push_back(i % 10);
    d.meta.push_back({});
  }
  auto perfect = stats::episodic_eval([](const meta::Episode&) { return 100.0; }, d, 5, 1, 15, 50, 1);
  CHECK(perfect.summary.mean == 100.0);
  CHECK(perfect.summary.sd == 0.0);
  auto guesser = [](const meta::Episode& e) {
    std::mt19937_64 rng(e.id);
    int right = 0;
    for (int l : e.query_labels) right += static_cast<int>(rng() % 5) == l;
    return 100.0 * right / e.query_labels.size();
  };
  auto g = stats::episodic_eval(guesser, d, 5, 1, 15, 1000, 2);
  CHECK(std::abs(g.summary.mean - 20.0) <= 2.0);
  CHECK(g.to_json()["accuracies"].size() == 1000);
  CHECK_THROWS_AS(stats::episodic_eval(guesser, d, 5, 1, 15, 1, 2), ArgumentError);
}

TEST_CASE("paired tests against reference values") {
  std::vector<double> a{0.81, 0.77, 0.92, 0.66, 0.85, 0.79, 0.88, 0.71, 0.95, 0.83, 0.80, 0.74};
  std::vector<double> b{0.78, 0.77, 0.85, 0.70, 0.80, 0.72, 0.88, 0.65, 0.90, 0.79, 0.81, 0.70};
  auto t = stats::paired_t(a, b);
  REQUIRE(t);
  CHECK(t->p == doctest::Approx(0.012574966223845529).epsilon(1e-9));
  CHECK(stats::wilcoxon(a, b) == doctest::Approx(0.018826058670236654).epsilon(1e-9));
  auto r = stats::paired_tests(a, b, 3);
  CHECK(*r.bonferroni_p == doctest::Approx(3 * 0.012574966223845529));
  CHECK(*r.cohens_d > 0);
  auto same = stats::paired_tests(a, a, 5);
  CHECK(!same.t_p);
  CHECK(same.wilcoxon_p == 1.0);
  CHECK(*same.bonferroni_p == 1.0);
  CHECK(*same.cohens_d == 0.0);
  CHECK_THROWS_AS(stats::paired_tests({1, 2}, {1, 3}, 1), ArgumentError);
}

TEST_CASE("multiplicity corrections") {
  CHECK(stats::bonferroni(0.0003, 135) == doctest::Approx(0.0405));
  CHECK(stats::bonferroni(0.2, 10) == 1.0);
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 0.05);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> p(1 + t % 12);
    for (auto& x : p) x = u(rng);
    const int m = static_cast<int>(p.size()) + t % 5;
    auto h = stats::holm(p, m);
    for (std::size_t i = 0; i < p.size(); ++i) {
      CHECK(h[i] <= stats::bonferroni(p[i], m) + 1e-15);
      CHECK(h[i] >= p[i]);
      for (std::size_t j = 0; j < p.size(); ++j)
        if (p[i] <= p[j]) CHECK(h[i] <= h[j]);
    }
  }
  auto h = stats::holm({0.01, 0.04, 0.03}, 3);
  CHECK(h[0] == doctest::Approx(0.03));
  CHECK(h[2] == doctest::Approx(0.06));
  CHECK(h[1] == doctest::Approx(0.06));
}

TEST_CASE("Cohen's d sign follows the mean difference") {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd;
  for (int t = 0; t < 100; ++t) {
    std::vector<double> a(12), b(12);
    for (auto& x : a) x = nd(rng);
    for (auto& x : b) x = nd(rng) + 0.3;
    const double diff = std::accumulate(a.begin(), a.end(), 0.0) - std::accumulate(b.begin(), b.end(), 0.0);
    CHECK((*stats::cohens_d(a, b) > 0) == (diff > 0));
  }
}

TEST_CASE("Shapiro-Wilk against reference values") {
  struct Case {
    std::vector<double> x;
    double w, p;
  };
  std::vector<Case> cases{
      {{1.0, 2.0, 4.0}, 0.9642857142857142, 0.6368868450289689},
      {{2.1, 3.4, 1.9, 5.6, 4.4}, 0.9320849391953863, 0.6106559022604845},
      {{148, 154, 158, 160, 161, 162, 166, 170, 182, 195}, 0.9080491141028906, 0.2678575575376505},
      {{0.5, 1.2, -0.3, 2.2, 0.9, 1.1, -1.4, 0.0, 0.7, 3.1, 1.6, -0.8, 0.2, 0.4, 1.9, -0.1, 2.7, 0.6, 1.3, 5.0},
       0.9517671028453112, 0.39471286371105574},
  };
  for (const auto& c : cases) {
    auto r = stats::shapiro_wilk(c.x);
    CHECK(r.w == doctest::Approx(c.w).epsilon(1e-6));
    CHECK(r.p == doctest::Approx(c.p).epsilon(1e-5));
  }
  CHECK_THROWS_AS(stats::shapiro_wilk({1, 1, 1, 1}), ArgumentError);
  CHECK_THROWS_AS(stats::shapiro_wilk({1, 2}), ArgumentError);
}

TEST_CASE("Levene against a reference value") {
  std::vector<std::vector<double>> g{
      {8.88, 9.12, 9.04, 8.98, 9.00, 9.08, 9.01, 8.85, 9.06, 8.99},
      {8.88, 8.95, 9.29, 9.44, 9.15, 9.58, 8.36, 9.18, 8.67, 9.05},
      {8.95, 9.12, 8.95, 8.85, 9.03, 8.84, 9.07, 8.98, 8.86, 8.98}};
  CHECK(stats::levene(g) == doctest::Approx(0.002431505967249681).epsilon(1e-8));
}

TEST_CASE("assumption check calibration and power") {
  auto normal = stats::assumption_checks(synthetic(64, 200, 4, 1, false));
  CHECK(normal.tested == 64);
  CHECK(normal.normal_fraction >= 0.9);
  CHECK(normal.equal_variance_fraction >= 0.9);
  auto heavy = stats::assumption_checks(synthetic(64, 200, 4, 2, true));
  CHECK(heavy.normal_fraction <= 0.2);
  auto rec = synthetic(4, 30, 3, 3, false);
  rec.layers[0].pooled.col(1).setConstant(2.0);
  auto r = stats::assumption_checks(rec);
  CHECK(r.excluded == 1);
  CHECK(r.tested == 3);
}
