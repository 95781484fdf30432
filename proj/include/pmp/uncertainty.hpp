#pragma once

// Monte-Carlo dropout predictions and calibration statistics.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pmp/net.hpp"

namespace pmp::uncertainty {

constexpr int kDefaultPasses = 20;
constexpr double kDefaultFlagThreshold = 0.15;

struct McPrediction {
  Eigen::MatrixXd mean;      // [samples x classes], rows sum to 1
  Eigen::MatrixXd variance;  // [samples x classes], population variance over passes
  std::vector<int> predicted;            // argmax of the mean
  std::vector<double> predicted_variance;  // variance of the predicted class
  std::vector<bool> flagged;             // predicted_variance > threshold
};

// Per-pass softmax statistics from raw pass outputs ([passes] x [samples x classes]).
McPrediction summarize_passes(const std::vector<Eigen::MatrixXd>& probs, double threshold = kDefaultFlagThreshold);

// T stochastic passes; pass t uses a generator seeded from (seed, t).
McPrediction mc_predict(const net::Network& net, const net::Batch& batch, int passes, std::uint64_t seed,
                        double threshold = kDefaultFlagThreshold, const net::ChannelMask* mask = nullptr);

struct CalibrationReport {
  std::size_t predictions = 0;
  double flag_rate = 0.0;
  std::optional<double> flagged_error;    // absent when nothing is flagged
  std::optional<double> unflagged_error;  // absent when everything is flagged
  std::optional<double> spearman;         // absent on rank degeneracy
  std::string note;
};

CalibrationReport calibration_report(const std::vector<double>& variance, const std::vector<bool>& correct,
                                     double threshold = kDefaultFlagThreshold);

// Midranks (1-based), ties share the mean rank.
std::vector<double> midranks(const std::vector<double>& v);
// Pearson correlation of midranks; absent when either side is constant.
std::optional<double> spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace pmp::uncertainty
