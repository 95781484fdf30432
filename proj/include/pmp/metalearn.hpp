#pragma once

// Episodic sampling, first-order inner/outer meta-updates with meta-gradient
// accumulation, refined importance, a prototype head, and the supervised
// training loop used for pre-training and fine-tuning.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "pmp/dacis.hpp"
#include "pmp/dataset.hpp"
#include "pmp/net.hpp"

namespace pmp::meta {

struct Episode {
  std::uint64_t id = 0;
  int ways = 0, shots = 0, queries = 0;
  std::vector<int> classes;  // dataset labels, position = episode label
  std::vector<int> support, query;  // dataset indices
  std::vector<int> support_labels, query_labels;  // 0..ways-1
};

// Draws `ways` distinct classes from `pool` (all classes when empty) and,
// per class, `shots` support and `queries` query samples without overlap.
Episode sample_episode(const data::Dataset& d, int ways, int shots, int queries, std::uint64_t seed,
                       const std::vector<int>& pool = {});

// ---------------------------------------------------------------------------
// Prototype head

struct PrototypeResult {
  Eigen::MatrixXd logits;  // [queries x ways], negative squared distances
  std::vector<int> predicted;
};

PrototypeResult prototype_classify(const Eigen::MatrixXd& support, const std::vector<int>& support_labels, int ways,
                                   const Eigen::MatrixXd& query);

struct PrototypeLoss {
  double loss = 0.0;
  double accuracy = 0.0;
  Eigen::MatrixXd grad_support;  // d loss / d support embeddings
  Eigen::MatrixXd grad_query;
};

// Mean cross-entropy of the prototype logits against the query labels.
PrototypeLoss prototype_loss(const Eigen::MatrixXd& support, const std::vector<int>& support_labels, int ways,
                             const Eigen::MatrixXd& query, const std::vector<int>& query_labels);

// ---------------------------------------------------------------------------
// First-order updates on flat parameter vectors

using GradFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

// theta - alpha * grad(theta)
Eigen::VectorXd inner_step(const Eigen::VectorXd& theta, const GradFn& support_grad, double alpha);

// theta - beta * sum_i query_grad_i(adapted_i); no second derivatives.
Eigen::VectorXd outer_step(const Eigen::VectorXd& theta, const std::vector<Eigen::VectorXd>& adapted,
                           const std::vector<GradFn>& query_grads, double beta);

// ---------------------------------------------------------------------------
// Network meta-learning

struct MetaSettings {
  double alpha = 0.01;
  double beta = 0.001;
  int ways = 5, shots = 5, queries = 15;
  int meta_batch = 4;
  bool signed_accumulator = false;
};

struct MetaState {
  net::Network params;
  double alpha = 0.01;
  double beta = 0.001;
  bool signed_accumulator = false;
  // Per conv layer: accumulated per-channel L2 norms of outer gradients
  // (vector), or in signed mode the summed filter gradients (matrix rows).
  std::map<std::string, Eigen::VectorXd> norm_sum;
  std::map<std::string, Eigen::MatrixXd> signed_sum;
  std::int64_t episodes = 0;

  static MetaState start(net::Network params, const MetaSettings& s);
  // Per-channel accumulator magnitude, whichever mode is active.
  std::map<std::string, Eigen::VectorXd> g_meta() const;
};

struct EpisodeLoss {
  double loss = 0.0;
  double accuracy = 0.0;
  net::Gradients grads;
};

// Prototype loss of `net` on the episode. With `on_support` the support set
// serves as its own query set.
EpisodeLoss episode_loss(const net::Network& net, const data::Dataset& d, const Episode& e, bool on_support);

// One inner step on the support loss.
net::Network inner_adapt(const MetaState& state, const data::Dataset& d, const Episode& e);

struct OuterRecord {
  std::int64_t step = 0;
  std::vector<std::uint64_t> episode_ids;
  std::vector<double> support_loss, query_loss, query_accuracy;
  nlohmann::json to_json() const;
};

// First-order outer update over a batch of episodes. Throws NumericalError
// (leaving `state` untouched) on a non-finite update.
OuterRecord outer_update(MetaState& state, const data::Dataset& d, const std::vector<Episode>& batch);

enum class RefineForm { Scaled, Product };  // (1 + gamma * g), g * dacis / max

// Scaled: refined = dacis * (1 + gamma * g_hat) with g_hat the per-layer
// min-max normalised meta-gradient norm (constant layers map to 0).
// Product: refined = dacis * |G_meta| / max_layer |G_meta|.
dacis::ImportanceTable refine_dacis(const dacis::ImportanceTable& scores,
                                    const std::map<std::string, Eigen::VectorXd>& g_meta, double gamma,
                                    RefineForm form = RefineForm::Scaled);

// ---------------------------------------------------------------------------
// Embeddings and episodic accuracy

// Penultimate (GAP) embeddings, [samples x dim], evaluated in chunks.
Eigen::MatrixXd embed(const net::Network& net, const data::Dataset& d, const std::vector<int>& idx,
                      const net::ChannelMask* mask = nullptr);

// Prototype accuracy on one episode, optionally after `adapt_steps` inner
// steps on the support loss.
double episode_accuracy(const net::Network& net, const data::Dataset& d, const Episode& e, int adapt_steps = 0,
                        double alpha = 0.01);

// ---------------------------------------------------------------------------
// Supervised training

enum class Optimizer { Sgd, Adam };

struct TrainSettings {
  int epochs = 10;
  int batch_size = 32;
  Optimizer optimizer = Optimizer::Adam;
  double learning_rate = 0.003;
  double momentum = 0.9;  // SGD momentum or Adam beta1
  double beta2 = 0.999;
  double weight_decay = 5e-4;
  bool augment = false;  // random horizontal flip
  std::uint64_t seed = 0;
};

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double accuracy = 0.0;
};

// Mini-batch SGD with momentum or Adam on cross-entropy; dropout active. Labels
// must be in [0, classes).
std::vector<EpochRecord> train_supervised(net::Network& net, const data::Dataset& d, const TrainSettings& s);

double classification_accuracy(const net::Network& net, const data::Dataset& d);

}  // namespace pmp::meta
