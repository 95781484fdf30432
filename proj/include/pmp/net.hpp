#pragma once

// Mask-aware toy convolutional networks.
//
// Activations are stored column-per-sample internally: a conv feature map
// batch is a [channels x (samples * H * W)] matrix, sample b occupying
// columns [b*H*W, (b+1)*H*W) in row-major pixel order. Public results that
// name "logits" or "embedding" are row-per-sample ([samples x features]).

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

namespace pmp::net {

enum class LayerKind { Conv, FullyConnected };

struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::Conv;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;  // square, padding kernel/2
  int stride = 1;
  bool pool_after = false;  // 2x2 average pooling after the activation
  double dropout = 0.0;     // applied to the layer input in stochastic mode
  int input_from = -1;      // source layer index, -1 = previous layer

  bool is_conv() const { return kind == LayerKind::Conv; }
};

// Shape-only description of a network. Used for cost accounting and
// pruning decisions on shapes too large to hold weights for.
struct Architecture {
  int input_channels = 3;
  int input_size = 32;
  std::vector<LayerSpec> layers;

  // Index of the layer feeding layer i, or -1 for the network input.
  int source_of(std::size_t i) const;
  std::vector<std::size_t> consumers_of(std::size_t i) const;
  // Layers whose output channels may be masked (all conv layers).
  std::vector<std::size_t> prunable_layers() const;
  std::optional<std::size_t> find(const std::string& name) const;
  // Full check: wiring plus a fully-connected final layer.
  void validate() const;
  // Unique names, channel compatibility, sources precede consumers.
  void validate_wiring() const;
  std::int64_t parameter_count() const;
};

struct Layer {
  LayerSpec spec;
  Eigen::MatrixXd weight;  // conv: [out x in*k*k], fc: [out x in]
  Eigen::VectorXd bias;    // [out]
};

struct Network {
  int input_channels = 3;
  int input_size = 32;  // nominal; conv layers are size agnostic
  std::vector<Layer> layers;

  Architecture architecture() const;
  void validate() const;
  std::int64_t parameter_count() const;
  int class_count() const;
  int embedding_dim() const;
  // Index of the first fully-connected layer (the classifier head).
  std::size_t head_index() const;
  bool has_dropout() const;
};

// Per-layer boolean retention vectors over output channels.
struct ChannelMask {
  std::map<std::string, std::vector<bool>> keep;

  static ChannelMask all_true(const Architecture& arch);
  const std::vector<bool>& at(const std::string& layer) const;
  int retained(const std::string& layer) const;
  int total_retained() const;
  // Throws StructuralError if keys or lengths disagree with arch, or a
  // layer would be emptied.
  void validate(const Architecture& arch) const;
  bool subset_of(const ChannelMask& other) const;
  bool operator==(const ChannelMask&) const = default;
};

nlohmann::json mask_to_json(const ChannelMask& mask);
ChannelMask mask_from_json(const nlohmann::json& j);
void save_mask(const ChannelMask& mask, const std::string& path);
ChannelMask load_mask(const std::string& path);

// Maps a mask over a repacked network (whose channels are the survivors of
// `prior`) back onto the original architecture.
ChannelMask compose_masks(const ChannelMask& prior, const ChannelMask& live);

struct Batch {
  int channels = 0;
  int height = 0;
  int width = 0;
  Eigen::MatrixXd data;  // [channels x (count * height * width)]
  std::vector<int> labels;

  int count() const { return static_cast<int>(labels.size()); }
};

struct LayerActivations {
  std::string layer;
  std::vector<int> channels;  // retained channel indices
  Eigen::MatrixXd pooled;     // [samples x retained channels], GAP values
};

struct ActivationRecord {
  std::vector<LayerActivations> layers;
  std::vector<int> labels;

  const LayerActivations& at(const std::string& layer) const;
};

struct CostReport {
  std::int64_t parameters = 0;
  std::int64_t macs = 0;
  double energy_mj = 0.0;
};

struct EnergyModel {
  double mac_mj = 4.6e-9;   // 32-bit float multiply-add, 45 nm
  double mem_mj = 6.4e-7;   // 32-bit DRAM access
};

enum class Mode { Inference, Stochastic };

struct ForwardOptions {
  const ChannelMask* mask = nullptr;
  Mode mode = Mode::Inference;
  std::mt19937_64* rng = nullptr;  // required in stochastic mode
  bool capture = false;            // fill the ActivationRecord
  bool keep_cache = false;         // required for backward
  bool stop_at_embedding = false;
};

struct LayerCache {
  Eigen::MatrixXd input;    // after dropout (what the weights saw)
  Eigen::MatrixXd dropout;  // keep/(1-p) multipliers, empty if unused
  Eigen::MatrixXd col;      // conv only: im2col of input
  Eigen::MatrixXd pre;      // pre-activation
  Eigen::MatrixXd act;      // post-activation, post-mask, pre-pool
  int in_h = 0, in_w = 0, out_h = 0, out_w = 0;
  bool gap_input = false;   // fc fed by global average pooling of a conv
};

struct ForwardResult {
  Eigen::MatrixXd logits;     // [samples x classes], empty if stopped early
  Eigen::MatrixXd embedding;  // [samples x dim], GAP input of the head
  ActivationRecord activations;
  std::vector<LayerCache> cache;
  std::vector<std::vector<double>> masks;  // per layer 0/1 output gates
  int samples = 0;
};

struct Gradients {
  std::vector<Eigen::MatrixXd> weight;
  std::vector<Eigen::VectorXd> bias;
  // Per conv layer [samples x out] Frobenius norms of the per-sample filter
  // gradient. Empty unless requested.
  std::vector<Eigen::MatrixXd> sample_channel_norms;

  static Gradients zeros_like(const Network& net);
  void add(const Gradients& other, double scale = 1.0);
  void scale(double s);
  bool all_finite() const;
  double squared_norm() const;
};

ForwardResult forward(const Network& net, const Batch& batch, const ForwardOptions& opts = {});

struct BackwardOptions {
  bool per_sample_channel_norms = false;
};

// d(loss)/d(logits), [samples x classes].
Gradients backward_from_logits(const Network& net, const ForwardResult& fwd,
                               const Eigen::MatrixXd& grad_logits,
                               const BackwardOptions& opts = {});
// d(loss)/d(embedding), [samples x dim].
Gradients backward_from_embedding(const Network& net, const ForwardResult& fwd,
                                  const Eigen::MatrixXd& grad_embedding,
                                  const BackwardOptions& opts = {});

// Masked inference forward with activation capture.
std::pair<Eigen::MatrixXd, ActivationRecord> forward_with_stats(const Network& net,
                                                                const ChannelMask& mask,
                                                                const Batch& batch);

struct LossAndGrad {
  double loss = 0.0;
  Eigen::MatrixXd grad;  // same shape as the logits
};

// Mean softmax cross-entropy; logits [samples x classes].
LossAndGrad softmax_cross_entropy(const Eigen::MatrixXd& logits, const std::vector<int>& labels);
Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& logits);

Network repack_network(const Network& net, const ChannelMask& mask);
Architecture repack_architecture(const Architecture& arch, const ChannelMask& mask);

CostReport count_cost(const Architecture& arch, int input_size, const EnergyModel& energy = {});
CostReport count_cost(const Network& net, int input_size, const EnergyModel& energy = {});

// He-initialised network from an architecture.
Network make_network(const Architecture& arch, std::uint64_t seed);

// Desk-scale backbone: conv stack with 2x2 pooling after each conv, GAP,
// dropout and a linear head.
Architecture toy_backbone(const std::vector<int>& widths, int classes, int input_channels = 3,
                          int input_size = 32, double head_dropout = 0.2);

// ResNet-18 channel/kernel/stride geometry at 224x224 with a 38-way head.
// Shortcut projections read from the block input via input_from; batch norm
// is represented by the conv bias. About 11.2M parameters.
Architecture resnet18_reference(int classes = 38);

void save_checkpoint(const Network& net, const std::string& path);
Network load_checkpoint(const std::string& path);

// Flattened parameter views, used by finite-difference Hessian probes.
Eigen::VectorXd flatten_parameters(const Network& net);
void assign_parameters(Network& net, const Eigen::VectorXd& flat);
Eigen::VectorXd flatten_gradients(const Gradients& grads);

void apply_gradients(Network& net, const Gradients& grads, double step);

}  // namespace pmp::net
