#pragma once

// Deployment metrics, episodic accuracy summaries, paired significance tests
// with multiplicity corrections, and activation distribution checks.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmp/dataset.hpp"
#include "pmp/metalearn.hpp"
#include "pmp/net.hpp"

namespace pmp::stats {

// accuracy * fps / (params_millions * energy_mj)
double des(double accuracy_pct, double fps, double params_millions, double energy_mj);
// 1 - sigma / mu with the population standard deviation.
double fsi(const std::vector<double>& accuracies);
// acc_late / acc_early
double csg(double acc_early, double acc_late);

struct Summary {
  double mean = 0.0;
  double sd = 0.0;  // population
  double ci_low = 0.0, ci_high = 0.0;  // mean -/+ 1.96 sd / sqrt(n)
  int n = 0;
};

Summary summarize(const std::vector<double>& values);

struct EpisodicResult {
  Summary summary;
  std::vector<double> accuracies;  // same units as the evaluator
  std::vector<std::uint64_t> episode_ids;
  nlohmann::json to_json() const;
};

using EpisodeEvaluator = std::function<double(const meta::Episode&)>;

// Episode i uses seed derive_seed(seed, i); classes are drawn from `pool`.
EpisodicResult episodic_eval(const EpisodeEvaluator& eval, const data::Dataset& d, int ways, int shots, int queries,
                             int episodes, std::uint64_t seed, const std::vector<int>& pool = {});

// ---------------------------------------------------------------------------
// Tests

struct TTest {
  double t = 0.0;
  double p = 1.0;
  int df = 0;
};

// Paired two-sided t-test on a - b; absent when the differences are constant.
std::optional<TTest> paired_t(const std::vector<double>& a, const std::vector<double>& b);

// Two-sided Wilcoxon signed-rank p-value, normal approximation with tie
// correction; zero differences are dropped. 1 when all differences are 0.
double wilcoxon(const std::vector<double>& a, const std::vector<double>& b);

double bonferroni(double p, int m);
// Holm step-down adjusted p-values for a family, with m >= family size
// hypotheses in total.
std::vector<double> holm(const std::vector<double>& p, int m);

// (mean_a - mean_b) / sqrt((sd_a^2 + sd_b^2) / 2), sample sds; absent when
// the pooled sd is zero and the means differ, 0 when both are equal.
std::optional<double> cohens_d(const std::vector<double>& a, const std::vector<double>& b);

struct PairedReport {
  std::string a, b;
  std::optional<double> t_p;
  double wilcoxon_p = 1.0;
  std::optional<double> bonferroni_p;  // from the t-test, Wilcoxon when absent
  std::optional<double> holm_p;        // filled by adjust_family
  std::optional<double> cohens_d;
  double mean_difference = 0.0;
  nlohmann::json to_json() const;
};

PairedReport paired_tests(const std::vector<double>& a, const std::vector<double>& b, int m, std::string name_a = "A",
                          std::string name_b = "B");

// Fills holm_p over the family using m total comparisons.
void adjust_family(std::vector<PairedReport>& family, int m);

// ---------------------------------------------------------------------------
// Distribution checks

struct ShapiroWilk {
  double w = 1.0;
  double p = 1.0;
};

// Royston's approximation; 3 <= n <= 5000 and a non-constant sample.
ShapiroWilk shapiro_wilk(std::vector<double> x);

// Brown-Forsythe (median-centred) Levene test; returns the p-value.
double levene(const std::vector<std::vector<double>>& groups);

struct AssumptionReport {
  double normal_fraction = 0.0;
  double equal_variance_fraction = 0.0;
  int tested = 0;
  int excluded = 0;  // constant channels
  nlohmann::json to_json() const;
};

// Per channel: Shapiro-Wilk on the pooled activations and Levene across
// the label groups, each at 0.05.
AssumptionReport assumption_checks(const net::ActivationRecord& acts, double level = 0.05);

}  // namespace pmp::stats
