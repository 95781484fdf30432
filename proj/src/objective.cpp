#include "pmp/objective.hpp"

#include <cmath>
#include <limits>

#include "pmp/errors.hpp"

namespace pmp::objective {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

void ObjectiveWeights::validate() const {
  if (lambda_c < 0 || lambda_g < 0 || alpha0 < 0 || alpha1 < 0 || alpha2 < 0)
    throw ArgumentError("objective weights must be non-negative");
}

double task_loss(const Eigen::MatrixXd& logits, const std::vector<int>& labels) {
  return net::softmax_cross_entropy(logits, labels).loss;
}

double compression_loss(const net::CostReport& cost, const net::CostReport& baseline, const ObjectiveWeights& w) {
  w.validate();
  auto term = [](double weight, double value, double base, const char* name) {
    if (weight == 0.0) return 0.0;
    if (!(base > 0.0)) throw ConfigError(std::string("baseline ") + name + " is zero");
    return weight * value / base;
  };
  return term(w.alpha0, static_cast<double>(cost.parameters), static_cast<double>(baseline.parameters),
              "parameter count") +
         term(w.alpha1, static_cast<double>(cost.macs), static_cast<double>(baseline.macs), "MAC count") +
         term(w.alpha2, cost.energy_mj, baseline.energy_mj, "energy");
}

namespace {

bool all_identical(const MatrixXd& x) {
  for (Index r = 1; r < x.rows(); ++r)
    if (x.row(r) != x.row(0)) return false;
  return true;
}

// log of the KDE density at each row of `at`, built from the rows of `from`.
// With `leave_one_out`, `at` and `from` are the same sample and point i
// does not contribute to its own density.
VectorXd log_density(const MatrixXd& at, const MatrixXd& from, const VectorXd& h, bool leave_one_out) {
  const Index d = h.size();
  const double count = static_cast<double>(from.rows() - (leave_one_out ? 1 : 0));
  const double log_norm =
      -static_cast<double>(d) * 0.5 * std::log(2.0 * M_PI) - h.array().log().sum() - std::log(count);
  const MatrixXd fs = from * h.cwiseInverse().asDiagonal();
  const MatrixXd as = at * h.cwiseInverse().asDiagonal();
  const VectorXd fn = fs.rowwise().squaredNorm();
  VectorXd out(at.rows());
  for (Index i = 0; i < at.rows(); ++i) {
    VectorXd q = (fn.array() - 2.0 * (fs * as.row(i).transpose()).array() + as.row(i).squaredNorm()) * -0.5;
    if (leave_one_out) q(i) = -std::numeric_limits<double>::infinity();
    const double m = q.maxCoeff();
    out(i) = log_norm + m + std::log((q.array() - m).exp().sum());
  }
  return out;
}

}  // namespace

double generalization_penalty(const Eigen::MatrixXd& meta, const Eigen::MatrixXd& novel, const KdeOptions& opts) {
  if (meta.rows() < 10 || novel.rows() < 10) throw ArgumentError("each sample needs at least 10 points");
  if (meta.cols() != novel.cols()) throw StructuralError("samples have different dimensions");
  if (opts.bandwidth && !(*opts.bandwidth > 0)) throw ArgumentError("bandwidth must be positive");
  if (all_identical(meta) || all_identical(novel))
    throw ArgumentError("degenerate sample (all points identical); supply a larger explicit bandwidth");

  MatrixXd pooled(meta.rows() + novel.rows(), meta.cols());
  pooled << meta, novel;
  // Dimensions constant over the pooled sample carry no information.
  std::vector<Index> dims;
  VectorXd sd = ((pooled.rowwise() - pooled.colwise().mean()).array().square().colwise().sum() /
                 static_cast<double>(pooled.rows() - 1))
                    .sqrt()
                    .transpose();
  for (Index j = 0; j < pooled.cols(); ++j)
    if (sd(j) > 0) dims.push_back(j);
  const Index d = static_cast<Index>(dims.size());
  VectorXd h(d);
  const double scott = std::pow(static_cast<double>(pooled.rows()), -1.0 / (static_cast<double>(d) + 4.0));
  for (Index k = 0; k < d; ++k) h(k) = opts.bandwidth ? *opts.bandwidth : sd(dims[k]) * scott;

  MatrixXd p = meta(Eigen::all, dims);
  MatrixXd q = novel(Eigen::all, dims);
  const double kl_pq = (log_density(p, p, h, true) - log_density(p, q, h, false)).mean();
  const double kl_qp = (log_density(q, q, h, true) - log_density(q, p, h, false)).mean();
  const double v = kl_pq + kl_qp;
  if (!std::isfinite(v)) throw NumericalError("density estimate underflowed; increase the bandwidth");
  return std::max(0.0, v);
}

double total_loss(double task, double compress, double gen, const ObjectiveWeights& w) {
  w.validate();
  if (!std::isfinite(task) || !std::isfinite(compress) || !std::isfinite(gen))
    throw NumericalError("non-finite loss component");
  return task + w.lambda_c * compress + w.lambda_g * gen;
}

}  // namespace pmp::objective
