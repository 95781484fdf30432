#include "pmp/uncertainty.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "pmp/errors.hpp"

namespace pmp::uncertainty {

using Eigen::Index;
using Eigen::MatrixXd;

McPrediction summarize_passes(const std::vector<Eigen::MatrixXd>& probs, double threshold) {
  if (probs.size() < 2) throw ArgumentError("at least 2 stochastic passes are required");
  const Index n = probs[0].rows(), c = probs[0].cols();
  McPrediction out;
  // Shifted by the first pass so identical passes give exactly zero spread.
  MatrixXd shift = MatrixXd::Zero(n, c);
  for (const auto& p : probs) {
    if (p.rows() != n || p.cols() != c) throw StructuralError("passes have different shapes");
    shift += p - probs[0];
  }
  out.mean = probs[0] + shift / static_cast<double>(probs.size());
  out.variance = MatrixXd::Zero(n, c);
  for (const auto& p : probs) out.variance += (p - out.mean).array().square().matrix();
  out.variance /= static_cast<double>(probs.size());
  for (Index r = 0; r < n; ++r) {
    Index best = 0;
    out.mean.row(r).maxCoeff(&best);
    out.predicted.push_back(static_cast<int>(best));
    out.predicted_variance.push_back(out.variance(r, best));
    out.flagged.push_back(out.variance(r, best) > threshold);
  }
  return out;
}

McPrediction mc_predict(const net::Network& net, const net::Batch& batch, int passes, std::uint64_t seed,
                        double threshold, const net::ChannelMask* mask) {
  if (passes < 2) throw ArgumentError("at least 2 stochastic passes are required");
  std::vector<MatrixXd> probs;
  probs.reserve(static_cast<std::size_t>(passes));
  for (int t = 0; t < passes; ++t) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(t)};
    std::mt19937_64 rng(seq);
    net::ForwardOptions fo;
    fo.mask = mask;
    fo.mode = net::Mode::Stochastic;
    fo.rng = &rng;
    probs.push_back(net::softmax_rows(net::forward(net, batch, fo).logits));
  }
  return summarize_passes(probs, threshold);
}

std::vector<double> midranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = rank;
    i = j + 1;
  }
  return r;
}

std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw StructuralError("rank correlation inputs differ in length");
  if (a.size() < 2) return std::nullopt;
  auto ra = midranks(a), rb = midranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return std::nullopt;
  return sab / std::sqrt(saa * sbb);
}

CalibrationReport calibration_report(const std::vector<double>& variance, const std::vector<bool>& correct,
                                     double threshold) {
  if (variance.size() != correct.size()) throw StructuralError("variance and correctness lengths differ");
  if (variance.size() < 100) throw ArgumentError("calibration needs at least 100 predictions");
  CalibrationReport r;
  r.predictions = variance.size();
  std::size_t flagged = 0, flagged_err = 0, unflagged_err = 0;
  std::vector<double> err(variance.size());
  for (std::size_t i = 0; i < variance.size(); ++i) {
    const bool f = variance[i] > threshold;
    err[i] = correct[i] ? 0.0 : 1.0;
    if (f) {
      ++flagged;
      flagged_err += !correct[i];
    } else {
      unflagged_err += !correct[i];
    }
  }
  const double n = static_cast<double>(variance.size());
  r.flag_rate = static_cast<double>(flagged) / n;
  if (flagged > 0) r.flagged_error = static_cast<double>(flagged_err) / static_cast<double>(flagged);
  if (flagged < variance.size())
    r.unflagged_error = static_cast<double>(unflagged_err) / static_cast<double>(variance.size() - flagged);
  r.spearman = spearman(variance, err);
  if (!r.spearman) {
    const bool all_same_err = std::all_of(err.begin(), err.end(), [&](double e) { return e == err[0]; });
    r.note = all_same_err ? "rank correlation undefined: predictions are all correct or all wrong"
                          : "rank correlation undefined: variance is constant";
  }
  return r;
}

}  // namespace pmp::uncertainty
