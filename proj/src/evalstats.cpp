#include "pmp/evalstats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/math/distributions/fisher_f.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "pmp/errors.hpp"
#include "pmp/random.hpp"

namespace pmp::stats {

namespace bm = boost::math;

double des(double accuracy_pct, double fps, double params_millions, double energy_mj) {
  if (!(fps > 0) || !(params_millions > 0) || !(energy_mj > 0) || !(accuracy_pct > 0))
    throw ArgumentError("DES inputs must be positive");
  return accuracy_pct * fps / (params_millions * energy_mj);
}

double fsi(const std::vector<double>& accuracies) {
  if (accuracies.size() < 2) throw ArgumentError("FSI needs at least two accuracies");
  const auto s = summarize(accuracies);
  if (!(s.mean > 0)) throw ArgumentError("FSI undefined for non-positive mean accuracy");
  return 1.0 - s.sd / s.mean;
}

double csg(double acc_early, double acc_late) {
  if (!(acc_early > 0)) throw ArgumentError("CSG needs a positive early-stage accuracy");
  return acc_late / acc_early;
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  s.n = static_cast<int>(values.size());
  if (values.empty()) return s;
  // accumulated relative to the first value
  const double ref = values.front();
  double sum = 0.0, sq = 0.0;
  for (double v : values) sum += v - ref;
  const double shift = sum / s.n;
  for (double v : values) sq += (v - ref - shift) * (v - ref - shift);
  s.mean = ref + shift;
  s.sd = std::sqrt(sq / s.n);
  const double half = 1.96 * s.sd / std::sqrt(double(s.n));
  s.ci_low = s.mean - half;
  s.ci_high = s.mean + half;
  return s;
}

nlohmann::json EpisodicResult::to_json() const {
  return {{"mean", summary.mean},          {"sd", summary.sd},       {"ci95", {summary.ci_low, summary.ci_high}},
          {"episodes", summary.n},         {"accuracies", accuracies}, {"episode_ids", episode_ids}};
}

EpisodicResult episodic_eval(const EpisodeEvaluator& eval, const data::Dataset& d, int ways, int shots, int queries,
                             int episodes, std::uint64_t seed, const std::vector<int>& pool) {
  if (episodes < 2) throw ArgumentError("episodic evaluation needs at least two episodes");
  EpisodicResult r;
  for (int i = 0; i < episodes; ++i) {
    const auto e = meta::sample_episode(d, ways, shots, queries, rnd::derive_seed(seed, static_cast<std::uint64_t>(i)), pool);
    r.accuracies.push_back(eval(e));
    r.episode_ids.push_back(e.id);
  }
  r.summary = summarize(r.accuracies);
  return r;
}

namespace {

void check_pairs(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw ArgumentError("paired samples differ in length");
  if (a.size() < 2) throw ArgumentError("paired tests need at least two pairs");
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size()); }

double sample_var(const std::vector<double>& v) {
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return ss / double(v.size() - 1);
}

double normal_two_sided(double z) { return 2.0 * bm::cdf(bm::complement(bm::normal(), std::abs(z))); }

}  // namespace

std::optional<TTest> paired_t(const std::vector<double>& a, const std::vector<double>& b) {
  check_pairs(a, b);
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  const double var = sample_var(d);
  if (!(var > 0)) return std::nullopt;
  TTest t;
  t.df = static_cast<int>(d.size()) - 1;
  t.t = mean_of(d) / std::sqrt(var / double(d.size()));
  t.p = 2.0 * bm::cdf(bm::complement(bm::students_t(t.df), std::abs(t.t)));
  return t;
}

double wilcoxon(const std::vector<double>& a, const std::vector<double>& b) {
  check_pairs(a, b);
  std::vector<double> d;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) d.push_back(a[i] - b[i]);
  const auto n = d.size();
  if (n == 0) return 1.0;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto i, auto j) { return std::abs(d[i]) < std::abs(d[j]); });
  double w_plus = 0.0, tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::abs(d[order[j + 1]]) == std::abs(d[order[i]])) ++j;
    const double rank = 0.5 * double(i + j) + 1.0;
    const double t = double(j - i + 1);
    tie_term += t * t * t - t;
    for (std::size_t k = i; k <= j; ++k)
      if (d[order[k]] > 0) w_plus += rank;
    i = j + 1;
  }
  const double nn = double(n);
  const double mean = nn * (nn + 1) / 4.0;
  const double var = nn * (nn + 1) * (2 * nn + 1) / 24.0 - tie_term / 48.0;
  if (!(var > 0)) return 1.0;
  return std::min(1.0, normal_two_sided((w_plus - mean) / std::sqrt(var)));
}

double bonferroni(double p, int m) {
  if (m < 1) throw ArgumentError("comparison count must be at least 1");
  return std::min(1.0, p * m);
}

std::vector<double> holm(const std::vector<double>& p, int m) {
  if (m < static_cast<int>(p.size()) || m < 1) throw ArgumentError("comparison count smaller than the family");
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return p[i] < p[j]; });
  std::vector<double> out(p.size());
  double running = 0.0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    running = std::max(running, std::min(1.0, double(m - static_cast<int>(r)) * p[order[r]]));
    out[order[r]] = running;
  }
  return out;
}

std::optional<double> cohens_d(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2) throw ArgumentError("effect size needs at least two values per group");
  const double diff = mean_of(a) - mean_of(b);
  const double pooled = std::sqrt((sample_var(a) + sample_var(b)) / 2.0);
  if (pooled > 0) return diff / pooled;
  if (diff == 0) return 0.0;
  return std::nullopt;
}

nlohmann::json PairedReport::to_json() const {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"a", a},
          {"b", b},
          {"t_p", opt(t_p)},
          {"wilcoxon_p", wilcoxon_p},
          {"bonferroni_p", opt(bonferroni_p)},
          {"holm_p", opt(holm_p)},
          {"cohens_d", opt(cohens_d)},
          {"mean_difference", mean_difference}};
}

PairedReport paired_tests(const std::vector<double>& a, const std::vector<double>& b, int m, std::string name_a,
                          std::string name_b) {
  if (a.size() < 10) throw ArgumentError("paired tests need at least 10 pairs");
  if (m < 1) throw ArgumentError("comparison count must be at least 1");
  PairedReport r;
  r.a = std::move(name_a);
  r.b = std::move(name_b);
  if (auto t = paired_t(a, b)) r.t_p = t->p;
  r.wilcoxon_p = wilcoxon(a, b);
  r.bonferroni_p = bonferroni(r.t_p.value_or(r.wilcoxon_p), m);
  r.holm_p = r.bonferroni_p;
  r.cohens_d = cohens_d(a, b);
  r.mean_difference = mean_of(a) - mean_of(b);
  return r;
}

void adjust_family(std::vector<PairedReport>& family, int m) {
  std::vector<double> p;
  for (const auto& r : family) p.push_back(r.t_p.value_or(r.wilcoxon_p));
  const auto adj = holm(p, m);
  for (std::size_t i = 0; i < family.size(); ++i) family[i].holm_p = adj[i];
}

namespace {

double poly(const double* c, int n, double x) {
  double r = c[n - 1];
  for (int i = n - 2; i >= 0; --i) r = r * x + c[i];
  return r;
}

}  // namespace

ShapiroWilk shapiro_wilk(std::vector<double> x) {
  const int n = static_cast<int>(x.size());
  if (n < 3 || n > 5000) throw ArgumentError("Shapiro-Wilk needs 3 to 5000 values");
  std::sort(x.begin(), x.end());
  if (!(x.back() - x.front() > 0)) throw ArgumentError("Shapiro-Wilk undefined for a constant sample");

  static const double c1[] = {0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056};
  static const double c2[] = {0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633};
  const int half = n / 2;
  std::vector<double> a(static_cast<std::size_t>(half) + 1, 0.0);  // 1-based
  if (n == 3) {
    a[1] = std::sqrt(0.5);
  } else {
    const bm::normal snd;
    const double an25 = n + 0.25;
    double summ2 = 0.0;
    for (int i = 1; i <= half; ++i) {
      a[i] = bm::quantile(snd, (i - 0.375) / an25);
      summ2 += a[i] * a[i];
    }
    summ2 *= 2.0;
    const double ssumm2 = std::sqrt(summ2);
    const double rsn = 1.0 / std::sqrt(double(n));
    const double a1 = poly(c1, 6, rsn) - a[1] / ssumm2;
    int first;
    double fac;
    if (n > 5) {
      first = 3;
      const double a2 = -a[2] / ssumm2 + poly(c2, 6, rsn);
      fac = std::sqrt((summ2 - 2.0 * a[1] * a[1] - 2.0 * a[2] * a[2]) / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2));
      a[2] = a2;
    } else {
      first = 2;
      fac = std::sqrt((summ2 - 2.0 * a[1] * a[1]) / (1.0 - 2.0 * a1 * a1));
    }
    a[1] = a1;
    for (int i = first; i <= half; ++i) a[i] = -a[i] / fac;
  }

  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double ssq = 0.0;
  for (double v : x) ssq += (v - mean) * (v - mean);
  double num = 0.0;
  for (int i = 1; i <= half; ++i) num += a[i] * (x[n - i] - x[i - 1]);
  ShapiroWilk r;
  r.w = std::min(1.0, num * num / ssq);

  if (n == 3) {
    r.p = std::max(0.0, 6.0 / M_PI * (std::asin(std::sqrt(r.w)) - M_PI / 3.0));
    return r;
  }
  static const double g[] = {-2.273, 0.459};
  static const double c3[] = {0.5440, -0.39978, 0.025054, -6.714e-4};
  static const double c4[] = {1.3822, -0.77857, 0.062767, -0.0020322};
  static const double c5[] = {-1.5861, -0.31082, -0.083751, 0.0038915};
  static const double c6[] = {-0.4803, -0.082676, 0.0030302};
  double y = std::log1p(-r.w);
  double m, s;
  if (n <= 11) {
    const double gamma = poly(g, 2, n);
    if (y >= gamma) {
      r.p = 1e-99;
      return r;
    }
    y = -std::log(gamma - y);
    m = poly(c3, 4, n);
    s = std::exp(poly(c4, 4, n));
  } else {
    const double ln = std::log(double(n));
    m = poly(c5, 4, ln);
    s = std::exp(poly(c6, 3, ln));
  }
  r.p = bm::cdf(bm::complement(bm::normal(m, s), y));
  return r;
}

double levene(const std::vector<std::vector<double>>& groups) {
  std::vector<std::vector<double>> z;
  for (const auto& g : groups) {
    if (g.empty()) continue;
    std::vector<double> s = g;
    std::sort(s.begin(), s.end());
    const std::size_t n = s.size();
    const double med = n % 2 ? s[n / 2] : 0.5 * (s[n / 2 - 1] + s[n / 2]);
    std::vector<double> dev;
    for (double v : g) dev.push_back(std::abs(v - med));
    z.push_back(std::move(dev));
  }
  const int k = static_cast<int>(z.size());
  int total = 0;
  for (const auto& g : z) total += static_cast<int>(g.size());
  if (k < 2 || total <= k) throw ArgumentError("Levene test needs two groups and more samples than groups");
  double grand = 0.0;
  for (const auto& g : z) grand += std::accumulate(g.begin(), g.end(), 0.0);
  grand /= total;
  double between = 0.0, within = 0.0;
  for (const auto& g : z) {
    const double m = mean_of(g);
    between += double(g.size()) * (m - grand) * (m - grand);
    for (double v : g) within += (v - m) * (v - m);
  }
  if (!(within > 0)) return between > 0 ? 0.0 : 1.0;
  const double f = (between / (k - 1)) / (within / (total - k));
  return bm::cdf(bm::complement(bm::fisher_f(k - 1, total - k), f));
}

nlohmann::json AssumptionReport::to_json() const {
  return {{"normal_fraction", normal_fraction},
          {"equal_variance_fraction", equal_variance_fraction},
          {"channels_tested", tested},
          {"channels_excluded", excluded}};
}

AssumptionReport assumption_checks(const net::ActivationRecord& acts, double level) {
  AssumptionReport r;
  int normal = 0, equal = 0;
  int classes = 0;
  for (int l : acts.labels) classes = std::max(classes, l + 1);
  for (const auto& layer : acts.layers) {
    const auto n = layer.pooled.rows();
    if (n != static_cast<Eigen::Index>(acts.labels.size())) throw StructuralError("activation rows do not match labels");
    for (Eigen::Index c = 0; c < layer.pooled.cols(); ++c) {
      const auto col = layer.pooled.col(c);
      if (!(col.maxCoeff() - col.minCoeff() > 1e-12 * std::max(1.0, col.cwiseAbs().maxCoeff()))) {
        ++r.excluded;
        continue;
      }
      std::vector<double> pooled(col.data(), col.data() + std::min<Eigen::Index>(n, 5000));
      std::vector<std::vector<double>> groups(static_cast<std::size_t>(classes));
      for (Eigen::Index i = 0; i < n; ++i) groups[static_cast<std::size_t>(acts.labels[i])].push_back(col(i));
      for (const auto& g : groups)
        if (!g.empty() && g.size() < 3) throw ArgumentError("assumption checks need at least 3 samples per class");
      ++r.tested;
      if (shapiro_wilk(pooled).p > level) ++normal;
      if (levene(groups) > level) ++equal;
    }
  }
  if (r.tested > 0) {
    r.normal_fraction = double(normal) / r.tested;
    r.equal_variance_fraction = double(equal) / r.tested;
  }
  return r;
}

}  // namespace pmp::stats
