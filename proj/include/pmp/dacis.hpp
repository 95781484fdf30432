#pragma once

// Channel importance: gradient sensitivity (with a Hutchinson curvature
// correction), pooled activation variance and per-channel Fisher
// discriminant, combined per layer after min-max normalisation.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "pmp/net.hpp"

namespace pmp::dacis {

struct DacisWeights {
  double gradient = 0.3;  // lambda_1
  double variance = 0.2;  // lambda_2
  double fisher = 0.5;    // lambda_3
  double eta = 1.0;       // Hessian scaling
  int hutchinson_probes = 16;

  void validate() const;
};

struct ThresholdParams {
  double tau_base = 0.1;
  double depth_gain = 0.5;
  double complexity_gain = 2.0;

  void validate() const;
};

struct ChannelImportance {
  int channel = 0;             // index in the layer's output channels
  double gradient = 0.0;       // G
  double gradient_aug = 0.0;   // G with curvature correction
  double variance = 0.0;       // V
  double fisher = 0.0;         // D
  double dacis = 0.0;          // combined, in [0,1]
  std::optional<double> refined;
};

struct LayerImportance {
  std::string layer;
  std::vector<ChannelImportance> channels;
};

struct ImportanceTable {
  std::vector<LayerImportance> layers;

  const LayerImportance& at(const std::string& layer) const;
  LayerImportance& at(const std::string& layer);
};

// {layer -> {channel -> {G, G_aug, V, D, dacis, refined}}}
nlohmann::json table_to_json(const ImportanceTable& table);

// Per conv layer, one entry per retained channel (ascending channel index).
using LayerScores = std::vector<std::pair<std::string, Eigen::VectorXd>>;

constexpr double kFisherEpsilon = 1e-8;

// Mean over samples of the per-sample Frobenius norm of dL/dW for each
// output filter (cross-entropy on the classifier head).
LayerScores gradient_norm(const net::Network& net, const net::ChannelMask& mask, const net::Batch& sample);

// Block-diagonal Hutchinson trace estimate. `hvp` returns H*v; `blocks`
// lists the coordinate ranges whose traces are wanted. Rademacher probes.
std::vector<double> hutchinson_block_traces(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& hvp,
                                            Eigen::Index dim,
                                            const std::vector<std::vector<Eigen::Index>>& blocks, int probes,
                                            std::uint64_t seed);

// G_aug = G * sqrt(1 + eta * max(0, tr H_c)), where H_c is the Hessian of
// the mean cross-entropy restricted to channel c's filter. Hessian-vector
// products by central differences of the gradient.
LayerScores hessian_augment(const LayerScores& g, const net::Network& net, const net::ChannelMask& mask,
                            const net::Batch& sample, double eta, int probes, std::uint64_t seed);

// Population variance over samples of each pooled channel.
Eigen::VectorXd feature_variance(const Eigen::MatrixXd& pooled);
LayerScores feature_variance(const net::ActivationRecord& acts);

// Between-class over within-class scatter per channel:
//   sum_n n_k (mean_n - mean)^2 / (sum_n sum_{x in n} (a(x) - mean_n)^2 + eps)
Eigen::VectorXd fisher_discriminant(const Eigen::MatrixXd& pooled, const std::vector<int>& labels);
LayerScores fisher_discriminant(const net::ActivationRecord& acts);

// Per-layer min-max normalisation to [0,1]; a constant vector maps to 0.5.
Eigen::VectorXd minmax_normalize(const Eigen::VectorXd& v);

// `channels` gives the retained channel indices per layer; when null the
// entries are numbered 0..n-1.
ImportanceTable combine_dacis(const LayerScores& gradient_aug, const LayerScores& variance,
                              const LayerScores& fisher, const DacisWeights& weights,
                              const LayerScores* raw_gradient = nullptr,
                              const std::vector<std::vector<int>>* channels = nullptr);

// Recombines the stored components under new weights (ablation variants).
void recombine(ImportanceTable& table, const DacisWeights& weights);

double layer_threshold(const ThresholdParams& params, int layer_index, int layer_count, double task_complexity);

// 1 - mean pairwise cosine similarity of class prototypes (rows).
double task_complexity(const Eigen::MatrixXd& prototypes);

struct ScoringOptions {
  DacisWeights weights;
  std::uint64_t seed = 0;
  int hessian_samples = 64;  // leading samples used for curvature probes
};

// Full DACIS pass over a labelled sample of base-class data.
ImportanceTable score_network(const net::Network& net, const net::ChannelMask& mask, const net::Batch& sample,
                              const ScoringOptions& opts);

}  // namespace pmp::dacis
