#pragma once

// Composite objective: task loss + lambda_c * compression + lambda_g * shift.

#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "pmp/net.hpp"

namespace pmp::objective {

struct ObjectiveWeights {
  double lambda_c = 0.1;
  double lambda_g = 0.05;
  double alpha0 = 1.0;  // parameters
  double alpha1 = 1.0;  // MACs
  double alpha2 = 1.0;  // energy

  void validate() const;
};

// Mean cross-entropy; logits [samples x classes].
double task_loss(const Eigen::MatrixXd& logits, const std::vector<int>& labels);

// Weighted sum of parameter, MAC and energy ratios to the unpruned baseline.
double compression_loss(const net::CostReport& cost, const net::CostReport& baseline, const ObjectiveWeights& w);

struct KdeOptions {
  // Isotropic bandwidth; when absent, Scott's rule per dimension on the
  // pooled sample.
  std::optional<double> bandwidth;
};

// Symmetric KL divergence between Gaussian-kernel density estimates of two
// embedding samples (rows), each direction a Monte-Carlo average of log
// density ratios over that direction's sample. A sample's own density is
// evaluated leave-one-out. Clamped at 0.
double generalization_penalty(const Eigen::MatrixXd& meta, const Eigen::MatrixXd& novel, const KdeOptions& opts = {});

double total_loss(double task, double compress, double gen, const ObjectiveWeights& w);

}  // namespace pmp::objective
