#include "pmp/dacis.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "pmp/errors.hpp"

namespace pmp::dacis {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

void DacisWeights::validate() const {
  if (gradient < 0 || variance < 0 || fisher < 0) throw ArgumentError("DACIS weights must be non-negative");
  if (std::abs(gradient + variance + fisher - 1.0) > 1e-9)
    throw ArgumentError("DACIS weights must sum to 1");
  if (eta < 0) throw ArgumentError("eta must be non-negative");
  if (hutchinson_probes < 1) throw ArgumentError("at least one Hutchinson probe is required");
}

void ThresholdParams::validate() const {
  if (!(tau_base > 0)) throw ArgumentError("tau_base must be positive");
  if (depth_gain < 0 || complexity_gain < 0) throw ArgumentError("threshold gains must be non-negative");
}

const LayerImportance& ImportanceTable::at(const std::string& layer) const {
  for (const auto& l : layers)
    if (l.layer == layer) return l;
  throw LookupError("no importance scores for layer '" + layer + "'");
}

LayerImportance& ImportanceTable::at(const std::string& layer) {
  for (auto& l : layers)
    if (l.layer == layer) return l;
  throw LookupError("no importance scores for layer '" + layer + "'");
}

nlohmann::json table_to_json(const ImportanceTable& table) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& l : table.layers) {
    nlohmann::json layer = nlohmann::json::object();
    for (const auto& c : l.channels) {
      layer[std::to_string(c.channel)] = {
          {"G", c.gradient},
          {"G_aug", c.gradient_aug},
          {"V", c.variance},
          {"D", c.fisher},
          {"dacis", c.dacis},
          {"refined", c.refined ? nlohmann::json(*c.refined) : nlohmann::json(nullptr)},
      };
    }
    out[l.layer] = std::move(layer);
  }
  return out;
}

namespace {

std::vector<int> retained_channels(const net::ChannelMask& mask, const net::LayerSpec& spec) {
  std::vector<int> out;
  auto it = mask.keep.find(spec.name);
  for (int c = 0; c < spec.out_channels; ++c)
    if (it == mask.keep.end() || it->second[c]) out.push_back(c);
  return out;
}

// Filter-weight coordinates of each retained channel in flatten_parameters order.
std::vector<std::vector<Index>> filter_blocks(const net::Network& net, const net::ChannelMask& mask,
                                              std::vector<std::pair<std::size_t, std::vector<int>>>& layout) {
  std::vector<std::vector<Index>> blocks;
  Index offset = 0;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& l = net.layers[i];
    if (l.spec.is_conv()) {
      auto kept = retained_channels(mask, l.spec);
      const Index rows = l.weight.rows();
      for (int c : kept) {
        std::vector<Index> b;
        b.reserve(static_cast<std::size_t>(l.weight.cols()));
        for (Index j = 0; j < l.weight.cols(); ++j) b.push_back(offset + c + j * rows);
        blocks.push_back(std::move(b));
      }
      layout.emplace_back(i, std::move(kept));
    }
    offset += l.weight.size() + l.bias.size();
  }
  return blocks;
}

Eigen::VectorXd mean_ce_gradient(const net::Network& net, const net::ChannelMask& mask, const net::Batch& batch) {
  net::ForwardOptions fo;
  fo.mask = &mask;
  fo.keep_cache = true;
  auto fwd = net::forward(net, batch, fo);
  auto lg = net::softmax_cross_entropy(fwd.logits, batch.labels);
  return net::flatten_gradients(net::backward_from_logits(net, fwd, lg.grad));
}

net::Batch leading_samples(const net::Batch& b, int count) {
  if (count <= 0 || count >= b.count()) return b;
  net::Batch out;
  out.channels = b.channels;
  out.height = b.height;
  out.width = b.width;
  out.labels.assign(b.labels.begin(), b.labels.begin() + count);
  out.data = b.data.leftCols(static_cast<Index>(count) * b.height * b.width);
  return out;
}

}  // namespace

LayerScores gradient_norm(const net::Network& net, const net::ChannelMask& mask, const net::Batch& sample) {
  if (sample.count() == 0) throw ArgumentError("gradient_norm needs a non-empty sample");
  net::ForwardOptions fo;
  fo.mask = &mask;
  fo.keep_cache = true;
  auto fwd = net::forward(net, sample, fo);
  auto lg = net::softmax_cross_entropy(fwd.logits, sample.labels);
  // Per-sample losses rather than the batch mean.
  MatrixXd grad = lg.grad * static_cast<double>(sample.count());
  net::BackwardOptions bo;
  bo.per_sample_channel_norms = true;
  auto g = net::backward_from_logits(net, fwd, grad, bo);

  LayerScores out;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const auto& spec = net.layers[i].spec;
    if (!spec.is_conv()) continue;
    const MatrixXd& norms = g.sample_channel_norms[i];
    if (!norms.allFinite()) throw NumericalError("non-finite gradient in layer '" + spec.name + "'");
    auto kept = retained_channels(mask, spec);
    VectorXd v(static_cast<Index>(kept.size()));
    for (std::size_t k = 0; k < kept.size(); ++k) v(static_cast<Index>(k)) = norms.col(kept[k]).mean();
    out.emplace_back(spec.name, std::move(v));
  }
  return out;
}

std::vector<double> hutchinson_block_traces(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& hvp,
                                            Eigen::Index dim,
                                            const std::vector<std::vector<Eigen::Index>>& blocks, int probes,
                                            std::uint64_t seed) {
  if (probes < 1) throw ArgumentError("at least one Hutchinson probe is required");
  std::vector<Index> in_block;
  for (const auto& b : blocks) in_block.insert(in_block.end(), b.begin(), b.end());
  std::mt19937_64 rng(seed);
  std::vector<double> traces(blocks.size(), 0.0);
  for (int p = 0; p < probes; ++p) {
    VectorXd v = VectorXd::Zero(dim);
    for (Index idx : in_block) v(idx) = (rng() & 1u) ? 1.0 : -1.0;
    VectorXd hv = hvp(v);
    if (hv.size() != dim || !hv.allFinite()) throw NumericalError("Hessian-vector product is not finite");
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      double s = 0.0;
      for (Index idx : blocks[b]) s += v(idx) * hv(idx);
      traces[b] += s;
    }
  }
  for (double& t : traces) t /= probes;
  return traces;
}

LayerScores hessian_augment(const LayerScores& g, const net::Network& net, const net::ChannelMask& mask,
                            const net::Batch& sample, double eta, int probes, std::uint64_t seed) {
  if (eta < 0) throw ArgumentError("eta must be non-negative");
  if (eta == 0.0) return g;

  std::vector<std::pair<std::size_t, std::vector<int>>> layout;
  auto blocks = filter_blocks(net, mask, layout);
  const VectorXd theta = net::flatten_parameters(net);
  constexpr double h = 1e-4;
  net::Network probe = net;
  auto hvp = [&](const VectorXd& v) {
    net::assign_parameters(probe, theta + h * v);
    VectorXd gp = mean_ce_gradient(probe, mask, sample);
    net::assign_parameters(probe, theta - h * v);
    VectorXd gm = mean_ce_gradient(probe, mask, sample);
    return VectorXd((gp - gm) / (2.0 * h));
  };
  auto traces = hutchinson_block_traces(hvp, theta.size(), blocks, probes, seed);

  LayerScores out = g;
  std::size_t b = 0;
  for (std::size_t li = 0; li < layout.size(); ++li) {
    if (li >= out.size() || out[li].first != net.layers[layout[li].first].spec.name ||
        out[li].second.size() != static_cast<Index>(layout[li].second.size()))
      throw StructuralError("gradient scores do not match the network layout");
    for (Index c = 0; c < out[li].second.size(); ++c, ++b)
      out[li].second(c) *= std::sqrt(1.0 + eta * std::max(0.0, traces[b]));
  }
  return out;
}

Eigen::VectorXd feature_variance(const Eigen::MatrixXd& pooled) {
  if (pooled.rows() < 2) throw ArgumentError("feature variance needs at least 2 samples");
  VectorXd mean = pooled.colwise().mean().transpose();
  return ((pooled.rowwise() - mean.transpose()).array().square().colwise().sum() /
          static_cast<double>(pooled.rows()))
      .transpose();
}

LayerScores feature_variance(const net::ActivationRecord& acts) {
  LayerScores out;
  for (const auto& l : acts.layers) out.emplace_back(l.layer, feature_variance(l.pooled));
  return out;
}

Eigen::VectorXd fisher_discriminant(const Eigen::MatrixXd& pooled, const std::vector<int>& labels) {
  if (static_cast<Index>(labels.size()) != pooled.rows())
    throw StructuralError("label count does not match activation rows");
  std::map<int, std::vector<Index>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(static_cast<Index>(i));
  if (groups.size() < 2) throw ArgumentError("Fisher discriminant needs at least 2 classes");

  const VectorXd mean = pooled.colwise().mean().transpose();
  VectorXd between = VectorXd::Zero(pooled.cols());
  VectorXd within = VectorXd::Zero(pooled.cols());
  for (const auto& [label, rows] : groups) {
    VectorXd m = VectorXd::Zero(pooled.cols());
    for (Index r : rows) m += pooled.row(r).transpose();
    m /= static_cast<double>(rows.size());
    between += static_cast<double>(rows.size()) * (m - mean).array().square().matrix();
    for (Index r : rows) within += (pooled.row(r).transpose() - m).array().square().matrix();
  }
  return between.array() / (within.array() + kFisherEpsilon);
}

LayerScores fisher_discriminant(const net::ActivationRecord& acts) {
  LayerScores out;
  for (const auto& l : acts.layers) out.emplace_back(l.layer, fisher_discriminant(l.pooled, acts.labels));
  return out;
}

Eigen::VectorXd minmax_normalize(const Eigen::VectorXd& v) {
  if (v.size() == 0) return v;
  const double lo = v.minCoeff();
  const double hi = v.maxCoeff();
  if (!(hi > lo)) return VectorXd::Constant(v.size(), 0.5);
  return (v.array() - lo) / (hi - lo);
}

ImportanceTable combine_dacis(const LayerScores& gradient_aug, const LayerScores& variance,
                              const LayerScores& fisher, const DacisWeights& weights,
                              const LayerScores* raw_gradient, const std::vector<std::vector<int>>* channels) {
  weights.validate();
  const std::size_t L = gradient_aug.size();
  if (variance.size() != L || fisher.size() != L || (raw_gradient && raw_gradient->size() != L) ||
      (channels && channels->size() != L))
    throw StructuralError("importance components cover different layers");
  ImportanceTable table;
  for (std::size_t i = 0; i < L; ++i) {
    const auto& name = gradient_aug[i].first;
    const Index n = gradient_aug[i].second.size();
    if (variance[i].first != name || fisher[i].first != name || variance[i].second.size() != n ||
        fisher[i].second.size() != n || (raw_gradient && ((*raw_gradient)[i].first != name ||
                                                          (*raw_gradient)[i].second.size() != n)) ||
        (channels && static_cast<Index>((*channels)[i].size()) != n))
      throw StructuralError("importance components disagree on layer '" + name + "'");
    LayerImportance li;
    li.layer = name;
    li.channels.resize(static_cast<std::size_t>(n));
    for (Index c = 0; c < n; ++c) {
      auto& ch = li.channels[static_cast<std::size_t>(c)];
      ch.channel = channels ? (*channels)[i][static_cast<std::size_t>(c)] : static_cast<int>(c);
      ch.gradient_aug = gradient_aug[i].second(c);
      ch.gradient = raw_gradient ? (*raw_gradient)[i].second(c) : ch.gradient_aug;
      ch.variance = variance[i].second(c);
      ch.fisher = fisher[i].second(c);
      if (!std::isfinite(ch.gradient_aug) || !std::isfinite(ch.variance) || !std::isfinite(ch.fisher) ||
          ch.gradient_aug < 0 || ch.variance < 0 || ch.fisher < 0)
        throw NumericalError("invalid importance component in layer '" + name + "'");
    }
    table.layers.push_back(std::move(li));
  }
  recombine(table, weights);
  return table;
}

void recombine(ImportanceTable& table, const DacisWeights& weights) {
  weights.validate();
  for (auto& l : table.layers) {
    const Index n = static_cast<Index>(l.channels.size());
    VectorXd g(n), v(n), d(n);
    for (Index c = 0; c < n; ++c) {
      g(c) = l.channels[c].gradient_aug;
      v(c) = l.channels[c].variance;
      d(c) = l.channels[c].fisher;
    }
    g = minmax_normalize(g);
    v = minmax_normalize(v);
    d = minmax_normalize(d);
    for (Index c = 0; c < n; ++c) {
      l.channels[c].dacis = weights.gradient * g(c) + weights.variance * v(c) + weights.fisher * d(c);
      l.channels[c].refined.reset();
    }
  }
}

double layer_threshold(const ThresholdParams& params, int layer_index, int layer_count, double task_complexity) {
  params.validate();
  if (layer_count < 1 || layer_index < 0 || layer_index > layer_count)
    throw ArgumentError("layer index out of range");
  if (task_complexity < 0) throw ArgumentError("task complexity must be non-negative");
  return params.tau_base * (1.0 + params.depth_gain * layer_index / layer_count) *
         std::exp(-params.complexity_gain * task_complexity);
}

double task_complexity(const Eigen::MatrixXd& prototypes) {
  const Index n = prototypes.rows();
  if (n < 2) throw ArgumentError("task complexity needs at least 2 prototypes");
  VectorXd norms = prototypes.rowwise().norm();
  for (Index i = 0; i < n; ++i)
    if (!(norms(i) > 0)) throw ArgumentError("prototype " + std::to_string(i) + " has zero norm");
  double sum = 0.0;
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) sum += prototypes.row(i).dot(prototypes.row(j)) / (norms(i) * norms(j));
  return 1.0 - sum / (0.5 * static_cast<double>(n) * static_cast<double>(n - 1));
}

ImportanceTable score_network(const net::Network& net, const net::ChannelMask& mask, const net::Batch& sample,
                              const ScoringOptions& opts) {
  opts.weights.validate();
  auto [logits, acts] = net::forward_with_stats(net, mask, sample);
  auto g = gradient_norm(net, mask, sample);
  auto g_aug = hessian_augment(g, net, mask, leading_samples(sample, opts.hessian_samples), opts.weights.eta,
                               opts.weights.hutchinson_probes, opts.seed);
  std::vector<std::vector<int>> channels;
  for (const auto& l : acts.layers) channels.push_back(l.channels);
  return combine_dacis(g_aug, feature_variance(acts), fisher_discriminant(acts), opts.weights, &g, &channels);
}

}  // namespace pmp::dacis
