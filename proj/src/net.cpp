#include "pmp/net.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>
#include <tuple>

#include "pmp/errors.hpp"

namespace pmp::net {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Architecture

int Architecture::source_of(std::size_t i) const {
  const auto& spec = layers.at(i);
  if (spec.input_from >= 0) return spec.input_from;
  return static_cast<int>(i) - 1;
}

std::vector<std::size_t> Architecture::consumers_of(std::size_t i) const {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < layers.size(); ++j)
    if (source_of(j) == static_cast<int>(i)) out.push_back(j);
  return out;
}

std::vector<std::size_t> Architecture::prunable_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].is_conv()) out.push_back(i);
  return out;
}

std::optional<std::size_t> Architecture::find(const std::string& name) const {
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (layers[i].name == name) return i;
  return std::nullopt;
}

void Architecture::validate() const {
  validate_wiring();
  if (layers.back().is_conv()) throw StructuralError("last layer must be fully connected");
}

void Architecture::validate_wiring() const {
  if (layers.empty()) throw StructuralError("network has no layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& s = layers[i];
    for (std::size_t j = 0; j < i; ++j)
      if (layers[j].name == s.name) throw StructuralError("duplicate layer name '" + s.name + "'");
    if (s.in_channels <= 0 || s.out_channels <= 0)
      throw StructuralError("layer '" + s.name + "' has non-positive channel count");
    if (s.kernel <= 0 || s.stride <= 0)
      throw StructuralError("layer '" + s.name + "' has invalid kernel/stride");
    if (s.dropout < 0.0 || s.dropout >= 1.0)
      throw StructuralError("layer '" + s.name + "' dropout must lie in [0,1)");
    const int src = source_of(i);
    if (src >= static_cast<int>(i)) throw StructuralError("layer '" + s.name + "' reads from a later layer");
    const int expected = src < 0 ? input_channels : layers[src].out_channels;
    if (s.in_channels != expected)
      throw StructuralError("layer '" + s.name + "' expects " + std::to_string(s.in_channels) +
                            " input channels but its source provides " + std::to_string(expected));
    if (s.is_conv() && src >= 0 && !layers[src].is_conv())
      throw StructuralError("conv layer '" + s.name + "' cannot follow a fully-connected layer");
  }
}

std::int64_t Architecture::parameter_count() const {
  std::int64_t total = 0;
  for (const auto& s : layers) {
    const std::int64_t k2 = s.is_conv() ? static_cast<std::int64_t>(s.kernel) * s.kernel : 1;
    total += static_cast<std::int64_t>(s.out_channels) * s.in_channels * k2 + s.out_channels;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Network

Architecture Network::architecture() const {
  Architecture a;
  a.input_channels = input_channels;
  a.input_size = input_size;
  a.layers.reserve(layers.size());
  for (const auto& l : layers) a.layers.push_back(l.spec);
  return a;
}

void Network::validate() const {
  architecture().validate();
  for (const auto& l : layers) {
    const Index k2 = l.spec.is_conv() ? static_cast<Index>(l.spec.kernel) * l.spec.kernel : 1;
    if (l.weight.rows() != l.spec.out_channels || l.weight.cols() != l.spec.in_channels * k2)
      throw StructuralError("weight shape of layer '" + l.spec.name + "' does not match its channels");
    if (l.bias.size() != l.spec.out_channels)
      throw StructuralError("bias length of layer '" + l.spec.name + "' does not match its channels");
  }
}

std::int64_t Network::parameter_count() const {
  std::int64_t total = 0;
  for (const auto& l : layers) total += l.weight.size() + l.bias.size();
  return total;
}

int Network::class_count() const { return layers.back().spec.out_channels; }

std::size_t Network::head_index() const {
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (!layers[i].spec.is_conv()) return i;
  throw StructuralError("network has no fully-connected head");
}

int Network::embedding_dim() const { return layers[head_index()].spec.in_channels; }

bool Network::has_dropout() const {
  return std::any_of(layers.begin(), layers.end(), [](const Layer& l) { return l.spec.dropout > 0.0; });
}

// ---------------------------------------------------------------------------
// ChannelMask

ChannelMask ChannelMask::all_true(const Architecture& arch) {
  ChannelMask m;
  for (auto i : arch.prunable_layers())
    m.keep[arch.layers[i].name] = std::vector<bool>(arch.layers[i].out_channels, true);
  return m;
}

const std::vector<bool>& ChannelMask::at(const std::string& layer) const {
  auto it = keep.find(layer);
  if (it == keep.end()) throw LookupError("mask has no entry for layer '" + layer + "'");
  return it->second;
}

int ChannelMask::retained(const std::string& layer) const {
  const auto& v = at(layer);
  return static_cast<int>(std::count(v.begin(), v.end(), true));
}

int ChannelMask::total_retained() const {
  int n = 0;
  for (const auto& [name, v] : keep) n += static_cast<int>(std::count(v.begin(), v.end(), true));
  return n;
}

void ChannelMask::validate(const Architecture& arch) const {
  const auto prunable = arch.prunable_layers();
  if (keep.size() != prunable.size())
    throw StructuralError("mask covers " + std::to_string(keep.size()) + " layers, network has " +
                          std::to_string(prunable.size()) + " conv layers");
  for (auto i : prunable) {
    const auto& spec = arch.layers[i];
    auto it = keep.find(spec.name);
    if (it == keep.end()) throw StructuralError("mask is missing conv layer '" + spec.name + "'");
    if (static_cast<int>(it->second.size()) != spec.out_channels)
      throw StructuralError("mask for '" + spec.name + "' has length " + std::to_string(it->second.size()) +
                            ", layer has " + std::to_string(spec.out_channels) + " channels");
    if (std::none_of(it->second.begin(), it->second.end(), [](bool b) { return b; }))
      throw StructuralError("mask would empty layer '" + spec.name + "'");
  }
}

bool ChannelMask::subset_of(const ChannelMask& other) const {
  for (const auto& [name, v] : keep) {
    const auto& o = other.at(name);
    if (o.size() != v.size()) return false;
    for (std::size_t c = 0; c < v.size(); ++c)
      if (v[c] && !o[c]) return false;
  }
  return true;
}

nlohmann::json mask_to_json(const ChannelMask& mask) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, v] : mask.keep) {
    auto arr = nlohmann::json::array();
    for (bool b : v) arr.push_back(b ? 1 : 0);
    j[name] = std::move(arr);
  }
  return j;
}

ChannelMask mask_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw StructuralError("mask JSON must be an object");
  ChannelMask m;
  for (const auto& [name, arr] : j.items()) {
    if (!arr.is_array()) throw StructuralError("mask entry '" + name + "' must be an array");
    std::vector<bool> v;
    for (const auto& x : arr) {
      const int b = x.get<int>();
      if (b != 0 && b != 1) throw StructuralError("mask entry '" + name + "' must contain only 0/1");
      v.push_back(b == 1);
    }
    m.keep[name] = std::move(v);
  }
  return m;
}

void save_mask(const ChannelMask& mask, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write mask file " + path);
  out << mask_to_json(mask).dump(2) << "\n";
}

ChannelMask load_mask(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read mask file " + path);
  return mask_from_json(nlohmann::json::parse(in));
}

ChannelMask compose_masks(const ChannelMask& prior, const ChannelMask& live) {
  ChannelMask out = prior;
  for (auto& [name, v] : out.keep) {
    auto it = live.keep.find(name);
    if (it == live.keep.end()) throw StructuralError("live mask is missing layer '" + name + "'");
    std::size_t k = 0;
    for (std::size_t c = 0; c < v.size(); ++c) {
      if (!v[c]) continue;
      if (k >= it->second.size()) throw StructuralError("live mask for '" + name + "' is too short");
      v[c] = it->second[k++];
    }
    if (k != it->second.size()) throw StructuralError("live mask for '" + name + "' is too long");
  }
  return out;
}

const LayerActivations& ActivationRecord::at(const std::string& layer) const {
  for (const auto& l : layers)
    if (l.layer == layer) return l;
  throw LookupError("no activations recorded for layer '" + layer + "'");
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

int conv_out(int in, int k, int stride) { return (in + 2 * (k / 2) - k) / stride + 1; }

MatrixXd im2col(const MatrixXd& x, int c, int h, int w, int n, int k, int stride, int oh, int ow) {
  const int pad = k / 2;
  if (k == 1 && stride == 1) return x;
  const Index rows = static_cast<Index>(c) * k * k;
  MatrixXd col(rows, static_cast<Index>(n) * oh * ow);
  const double* src = x.data();
  const Index hw = static_cast<Index>(h) * w;
  for (int b = 0; b < n; ++b) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const Index j = (static_cast<Index>(b) * oh + oy) * ow + ox;
        double* dst = col.data() + j * rows;
        Index r = 0;
        for (int ci = 0; ci < c; ++ci) {
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride + ky - pad;
            for (int kx = 0; kx < k; ++kx, ++r) {
              const int ix = ox * stride + kx - pad;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
                dst[r] = 0.0;
              } else {
                dst[r] = src[(b * hw + static_cast<Index>(iy) * w + ix) * c + ci];
              }
            }
          }
        }
      }
    }
  }
  return col;
}

MatrixXd col2im(const MatrixXd& col, int c, int h, int w, int n, int k, int stride, int oh, int ow) {
  const int pad = k / 2;
  if (k == 1 && stride == 1) return col;
  MatrixXd x = MatrixXd::Zero(c, static_cast<Index>(n) * h * w);
  double* dst = x.data();
  const Index rows = col.rows();
  const Index hw = static_cast<Index>(h) * w;
  for (int b = 0; b < n; ++b) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        const Index j = (static_cast<Index>(b) * oh + oy) * ow + ox;
        const double* src = col.data() + j * rows;
        Index r = 0;
        for (int ci = 0; ci < c; ++ci) {
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride + ky - pad;
            for (int kx = 0; kx < k; ++kx, ++r) {
              const int ix = ox * stride + kx - pad;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              dst[(b * hw + static_cast<Index>(iy) * w + ix) * c + ci] += src[r];
            }
          }
        }
      }
    }
  }
  return x;
}

MatrixXd avg_pool2(const MatrixXd& x, int c, int h, int w, int n) {
  const int oh = h / 2, ow = w / 2;
  MatrixXd y(c, static_cast<Index>(n) * oh * ow);
  for (int b = 0; b < n; ++b)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const Index j = (static_cast<Index>(b) * oh + oy) * ow + ox;
        const Index base = static_cast<Index>(b) * h * w;
        const Index i00 = base + static_cast<Index>(2 * oy) * w + 2 * ox;
        y.col(j) = 0.25 * (x.col(i00) + x.col(i00 + 1) + x.col(i00 + w) + x.col(i00 + w + 1));
      }
  return y;
}

MatrixXd avg_unpool2(const MatrixXd& dy, int c, int h, int w, int n) {
  const int oh = h / 2, ow = w / 2;
  MatrixXd dx = MatrixXd::Zero(c, static_cast<Index>(n) * h * w);
  for (int b = 0; b < n; ++b)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const Index j = (static_cast<Index>(b) * oh + oy) * ow + ox;
        const Index base = static_cast<Index>(b) * h * w;
        const Index i00 = base + static_cast<Index>(2 * oy) * w + 2 * ox;
        const auto g = 0.25 * dy.col(j);
        dx.col(i00) += g;
        dx.col(i00 + 1) += g;
        dx.col(i00 + w) += g;
        dx.col(i00 + w + 1) += g;
      }
  return dx;
}

MatrixXd global_avg_pool(const MatrixXd& x, int c, int hw, int n) {
  MatrixXd y(c, n);
  for (int b = 0; b < n; ++b) y.col(b) = x.middleCols(static_cast<Index>(b) * hw, hw).rowwise().mean();
  return y;
}

MatrixXd global_avg_unpool(const MatrixXd& dy, int hw) {
  const Index n = dy.cols();
  MatrixXd dx(dy.rows(), n * hw);
  for (Index b = 0; b < n; ++b) dx.middleCols(b * hw, hw) = (dy.col(b) / hw).replicate(1, hw);
  return dx;
}

std::vector<double> gate_for(const LayerSpec& spec, const ChannelMask* mask) {
  std::vector<double> g(spec.out_channels, 1.0);
  if (mask == nullptr || !spec.is_conv()) return g;
  auto it = mask->keep.find(spec.name);
  if (it == mask->keep.end()) throw StructuralError("mask does not cover conv layer '" + spec.name + "'");
  if (static_cast<int>(it->second.size()) != spec.out_channels)
    throw StructuralError("mask length mismatch for layer '" + spec.name + "'");
  for (int c = 0; c < spec.out_channels; ++c) g[c] = it->second[c] ? 1.0 : 0.0;
  return g;
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward / backward

ForwardResult forward(const Network& net, const Batch& batch, const ForwardOptions& opts) {
  const int n = batch.count();
  if (n == 0) throw ArgumentError("forward called with an empty batch");
  if (batch.channels != net.input_channels)
    throw StructuralError("batch has " + std::to_string(batch.channels) + " channels, network expects " +
                          std::to_string(net.input_channels));
  if (batch.data.rows() != batch.channels ||
      batch.data.cols() != static_cast<Index>(n) * batch.height * batch.width)
    throw StructuralError("batch data shape does not match its declared geometry");
  if (opts.mode == Mode::Stochastic && opts.rng == nullptr)
    throw ArgumentError("stochastic forward requires a random generator");

  const Architecture arch = net.architecture();
  const std::size_t L = net.layers.size();
  const std::size_t head = net.head_index();
  ForwardResult res;
  res.samples = n;
  res.cache.resize(L);
  res.masks.resize(L);
  std::vector<MatrixXd> outputs(L);
  std::vector<std::pair<int, int>> out_hw(L, {1, 1});
  std::uniform_real_distribution<double> unif(0.0, 1.0);

  for (std::size_t i = 0; i < L; ++i) {
    const Layer& layer = net.layers[i];
    const LayerSpec& spec = layer.spec;
    const int src = arch.source_of(i);
    LayerCache& cache = res.cache[i];

    MatrixXd input;
    int h = 1, w = 1;
    if (src < 0) {
      if (!spec.is_conv()) throw StructuralError("first layer must be a conv layer");
      input = batch.data;
      h = batch.height;
      w = batch.width;
    } else if (!spec.is_conv() && net.layers[src].spec.is_conv()) {
      auto [sh, sw] = out_hw[src];
      input = global_avg_pool(outputs[src], net.layers[src].spec.out_channels, sh * sw, n);
      cache.gap_input = true;
      cache.in_h = sh;
      cache.in_w = sw;
    } else {
      input = outputs[src];
      std::tie(h, w) = out_hw[src];
    }
    if (input.rows() != spec.in_channels)
      throw StructuralError("layer '" + spec.name + "' received " + std::to_string(input.rows()) +
                            " channels, expects " + std::to_string(spec.in_channels));

    if (i == head) {
      res.embedding = input.transpose();
      if (opts.stop_at_embedding) {
        if (opts.keep_cache) res.cache.resize(i);
        break;
      }
    }

    if (opts.mode == Mode::Stochastic && spec.dropout > 0.0) {
      const double keep = 1.0 - spec.dropout;
      cache.dropout.resize(input.rows(), input.cols());
      for (Index t = 0; t < cache.dropout.size(); ++t)
        cache.dropout.data()[t] = unif(*opts.rng) < keep ? 1.0 / keep : 0.0;
      input = input.cwiseProduct(cache.dropout);
    }

    const auto gate = gate_for(spec, opts.mask);
    res.masks[i] = gate;
    const bool last = (i + 1 == L);

    if (spec.is_conv()) {
      const int oh = conv_out(h, spec.kernel, spec.stride);
      const int ow = conv_out(w, spec.kernel, spec.stride);
      if (oh <= 0 || ow <= 0) throw StructuralError("input too small for layer '" + spec.name + "'");
      MatrixXd col = im2col(input, spec.in_channels, h, w, n, spec.kernel, spec.stride, oh, ow);
      MatrixXd pre = layer.weight * col;
      pre.colwise() += layer.bias;
      MatrixXd act = pre.cwiseMax(0.0);
      for (int c = 0; c < spec.out_channels; ++c)
        if (gate[c] == 0.0) act.row(c).setZero();
      if (opts.capture) {
        LayerActivations rec;
        rec.layer = spec.name;
        MatrixXd gap = global_avg_pool(act, spec.out_channels, oh * ow, n);
        for (int c = 0; c < spec.out_channels; ++c)
          if (gate[c] != 0.0) rec.channels.push_back(c);
        rec.pooled.resize(n, static_cast<Index>(rec.channels.size()));
        for (std::size_t k = 0; k < rec.channels.size(); ++k)
          rec.pooled.col(static_cast<Index>(k)) = gap.row(rec.channels[k]).transpose();
        res.activations.layers.push_back(std::move(rec));
      }
      if (spec.pool_after) {
        if (oh < 2 || ow < 2) throw StructuralError("feature map too small to pool after '" + spec.name + "'");
        outputs[i] = avg_pool2(act, spec.out_channels, oh, ow, n);
        out_hw[i] = {oh / 2, ow / 2};
      } else {
        outputs[i] = act;
        out_hw[i] = {oh, ow};
      }
      cache.in_h = h;
      cache.in_w = w;
      cache.out_h = oh;
      cache.out_w = ow;
      if (opts.keep_cache) {
        cache.col = std::move(col);
        cache.pre = std::move(pre);
        cache.act = std::move(act);
        cache.input = std::move(input);
      }
    } else {
      MatrixXd pre = layer.weight * input;
      pre.colwise() += layer.bias;
      if (last) {
        res.logits = pre.transpose();
        outputs[i] = pre;
      } else {
        outputs[i] = pre.cwiseMax(0.0);
      }
      if (opts.keep_cache) {
        cache.pre = std::move(pre);
        cache.input = std::move(input);
      }
    }
  }
  if (opts.capture) res.activations.labels = batch.labels;
  if (!opts.keep_cache) res.cache.clear();
  return res;
}

namespace {

Gradients run_backward(const Network& net, const ForwardResult& fwd, std::vector<MatrixXd> grad_out,
                       const BackwardOptions& opts) {
  if (fwd.cache.empty()) throw ArgumentError("backward requires a forward pass with keep_cache");
  const Architecture arch = net.architecture();
  const int n = fwd.samples;
  Gradients g = Gradients::zeros_like(net);
  if (opts.per_sample_channel_norms) g.sample_channel_norms.resize(net.layers.size());

  for (std::size_t ii = grad_out.size(); ii-- > 0;) {
    if (grad_out[ii].size() == 0) continue;
    if (ii >= fwd.cache.size()) throw StructuralError("missing forward cache for layer " + std::to_string(ii));
    const Layer& layer = net.layers[ii];
    const LayerSpec& spec = layer.spec;
    const LayerCache& cache = fwd.cache[ii];
    const int src = arch.source_of(ii);
    const bool last = (ii + 1 == net.layers.size());

    MatrixXd d_in;
    if (spec.is_conv()) {
      MatrixXd dact = spec.pool_after ? avg_unpool2(grad_out[ii], spec.out_channels, cache.out_h, cache.out_w, n)
                                      : std::move(grad_out[ii]);
      MatrixXd dz = dact.cwiseProduct((cache.pre.array() > 0.0).cast<double>().matrix());
      const auto& gate = fwd.masks[ii];
      for (int c = 0; c < spec.out_channels; ++c)
        if (gate[c] == 0.0) dz.row(c).setZero();
      g.weight[ii].noalias() = dz * cache.col.transpose();
      g.bias[ii] = dz.rowwise().sum();
      if (opts.per_sample_channel_norms) {
        const Index ohw = static_cast<Index>(cache.out_h) * cache.out_w;
        MatrixXd norms(n, spec.out_channels);
        for (int b = 0; b < n; ++b) {
          MatrixXd dwb = dz.middleCols(b * ohw, ohw) * cache.col.middleCols(b * ohw, ohw).transpose();
          norms.row(b) = dwb.rowwise().norm().transpose();
        }
        g.sample_channel_norms[ii] = std::move(norms);
      }
      if (src >= 0) {
        MatrixXd dcol = layer.weight.transpose() * dz;
        d_in = col2im(dcol, spec.in_channels, cache.in_h, cache.in_w, n, spec.kernel, spec.stride, cache.out_h,
                      cache.out_w);
      }
    } else {
      MatrixXd dz = last ? std::move(grad_out[ii])
                         : MatrixXd(grad_out[ii].cwiseProduct((cache.pre.array() > 0.0).cast<double>().matrix()));
      g.weight[ii].noalias() = dz * cache.input.transpose();
      g.bias[ii] = dz.rowwise().sum();
      if (src >= 0) d_in = layer.weight.transpose() * dz;
    }
    if (src < 0) continue;
    if (cache.dropout.size() > 0) d_in = d_in.cwiseProduct(cache.dropout);
    if (cache.gap_input) d_in = global_avg_unpool(d_in, cache.in_h * cache.in_w);
    if (grad_out[src].size() == 0) {
      grad_out[src] = std::move(d_in);
    } else {
      grad_out[src] += d_in;
    }
  }
  return g;
}

}  // namespace

Gradients backward_from_logits(const Network& net, const ForwardResult& fwd, const MatrixXd& grad_logits,
                               const BackwardOptions& opts) {
  if (grad_logits.rows() != fwd.samples || grad_logits.cols() != net.class_count())
    throw StructuralError("logit gradient shape does not match the forward pass");
  if (fwd.cache.size() != net.layers.size()) throw ArgumentError("forward pass stopped before the logits");
  std::vector<MatrixXd> grad_out(net.layers.size());
  grad_out.back() = grad_logits.transpose();
  return run_backward(net, fwd, std::move(grad_out), opts);
}

Gradients backward_from_embedding(const Network& net, const ForwardResult& fwd, const MatrixXd& grad_embedding,
                                  const BackwardOptions& opts) {
  const std::size_t head = net.head_index();
  if (grad_embedding.rows() != fwd.samples || grad_embedding.cols() != net.embedding_dim())
    throw StructuralError("embedding gradient shape does not match the forward pass");
  const int src = net.architecture().source_of(head);
  if (src < 0) throw StructuralError("head has no source layer");
  std::vector<MatrixXd> grad_out(net.layers.size());
  const auto& src_cache = fwd.cache.at(static_cast<std::size_t>(src));
  const auto& src_spec = net.layers[src].spec;
  int hw = src_cache.out_h * src_cache.out_w;
  if (src_spec.pool_after) hw = (src_cache.out_h / 2) * (src_cache.out_w / 2);
  grad_out[src] = global_avg_unpool(grad_embedding.transpose(), hw);
  return run_backward(net, fwd, std::move(grad_out), opts);
}

std::pair<MatrixXd, ActivationRecord> forward_with_stats(const Network& net, const ChannelMask& mask,
                                                         const Batch& batch) {
  mask.validate(net.architecture());
  ForwardOptions opts;
  opts.mask = &mask;
  opts.capture = true;
  auto res = forward(net, batch, opts);
  return {std::move(res.logits), std::move(res.activations)};
}

Gradients Gradients::zeros_like(const Network& net) {
  Gradients g;
  for (const auto& l : net.layers) {
    g.weight.push_back(MatrixXd::Zero(l.weight.rows(), l.weight.cols()));
    g.bias.push_back(VectorXd::Zero(l.bias.size()));
  }
  return g;
}

void Gradients::add(const Gradients& other, double s) {
  if (other.weight.size() != weight.size()) throw StructuralError("gradient layer count mismatch");
  for (std::size_t i = 0; i < weight.size(); ++i) {
    weight[i] += s * other.weight[i];
    bias[i] += s * other.bias[i];
  }
}

void Gradients::scale(double s) {
  for (auto& w : weight) w *= s;
  for (auto& b : bias) b *= s;
}

bool Gradients::all_finite() const {
  for (const auto& w : weight)
    if (!w.allFinite()) return false;
  for (const auto& b : bias)
    if (!b.allFinite()) return false;
  return true;
}

double Gradients::squared_norm() const {
  double s = 0.0;
  for (const auto& w : weight) s += w.squaredNorm();
  for (const auto& b : bias) s += b.squaredNorm();
  return s;
}

MatrixXd softmax_rows(const MatrixXd& logits) {
  MatrixXd p(logits.rows(), logits.cols());
  for (Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    auto e = (logits.row(r).array() - m).exp();
    p.row(r) = e / e.sum();
  }
  return p;
}

LossAndGrad softmax_cross_entropy(const MatrixXd& logits, const std::vector<int>& labels) {
  const Index n = logits.rows();
  if (n == 0) throw ArgumentError("cross-entropy of an empty batch");
  if (static_cast<Index>(labels.size()) != n) throw StructuralError("label count does not match logits");
  LossAndGrad out;
  out.grad = softmax_rows(logits);
  double loss = 0.0;
  for (Index r = 0; r < n; ++r) {
    const int y = labels[r];
    if (y < 0 || y >= logits.cols()) throw ArgumentError("label " + std::to_string(y) + " out of range");
    const double m = logits.row(r).maxCoeff();
    const double lse = m + std::log((logits.row(r).array() - m).exp().sum());
    loss += lse - logits(r, y);
    out.grad(r, y) -= 1.0;
  }
  out.loss = loss / static_cast<double>(n);
  out.grad /= static_cast<double>(n);
  return out;
}

// ---------------------------------------------------------------------------
// Repacking and cost

namespace {

std::vector<Index> kept_indices(const std::vector<bool>& keep) {
  std::vector<Index> idx;
  for (std::size_t c = 0; c < keep.size(); ++c)
    if (keep[c]) idx.push_back(static_cast<Index>(c));
  return idx;
}

}  // namespace

Architecture repack_architecture(const Architecture& arch, const ChannelMask& mask) {
  mask.validate(arch);
  Architecture out = arch;
  for (auto i : arch.prunable_layers()) {
    const int kept = mask.retained(arch.layers[i].name);
    out.layers[i].out_channels = kept;
    for (auto j : arch.consumers_of(i)) out.layers[j].in_channels = kept;
  }
  return out;
}

Network repack_network(const Network& net, const ChannelMask& mask) {
  const Architecture arch = net.architecture();
  mask.validate(arch);
  Network out = net;
  for (auto i : arch.prunable_layers()) {
    const auto idx = kept_indices(mask.at(arch.layers[i].name));
    Layer& layer = out.layers[i];
    MatrixXd w(static_cast<Index>(idx.size()), layer.weight.cols());
    VectorXd b(static_cast<Index>(idx.size()));
    for (std::size_t r = 0; r < idx.size(); ++r) {
      w.row(static_cast<Index>(r)) = layer.weight.row(idx[r]);
      b(static_cast<Index>(r)) = layer.bias(idx[r]);
    }
    layer.weight = std::move(w);
    layer.bias = std::move(b);
    layer.spec.out_channels = static_cast<int>(idx.size());
  }
  // Input slices use the original weights of each consumer.
  for (auto i : arch.prunable_layers()) {
    const auto idx = kept_indices(mask.at(arch.layers[i].name));
    for (auto j : arch.consumers_of(i)) {
      Layer& cons = out.layers[j];
      const Index k2 = cons.spec.is_conv() ? static_cast<Index>(cons.spec.kernel) * cons.spec.kernel : 1;
      MatrixXd w(cons.weight.rows(), static_cast<Index>(idx.size()) * k2);
      for (std::size_t s = 0; s < idx.size(); ++s)
        w.middleCols(static_cast<Index>(s) * k2, k2) = cons.weight.middleCols(idx[s] * k2, k2);
      cons.weight = std::move(w);
      cons.spec.in_channels = static_cast<int>(idx.size());
    }
  }
  out.validate();
  return out;
}

CostReport count_cost(const Architecture& arch, int input_size, const EnergyModel& energy) {
  arch.validate_wiring();
  if (energy.mac_mj < 0.0 || energy.mem_mj < 0.0) throw ArgumentError("energy constants must be non-negative");
  if (input_size <= 0) throw ArgumentError("input size must be positive");
  CostReport r;
  std::vector<int> out_size(arch.layers.size(), 1);
  double energy_total = 0.0;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const auto& s = arch.layers[i];
    const int src = arch.source_of(i);
    std::int64_t macs = 0, params = 0, acts = 0;
    if (s.is_conv()) {
      const int in = src < 0 ? input_size : out_size[src];
      const int o = conv_out(in, s.kernel, s.stride);
      if (o <= 0) throw StructuralError("input too small for layer '" + s.name + "'");
      const std::int64_t k2 = static_cast<std::int64_t>(s.kernel) * s.kernel;
      params = static_cast<std::int64_t>(s.out_channels) * s.in_channels * k2 + s.out_channels;
      macs = static_cast<std::int64_t>(s.out_channels) * s.in_channels * k2 * o * o;
      acts = static_cast<std::int64_t>(s.out_channels) * o * o;
      out_size[i] = s.pool_after ? o / 2 : o;
    } else {
      params = static_cast<std::int64_t>(s.out_channels) * s.in_channels + s.out_channels;
      macs = static_cast<std::int64_t>(s.out_channels) * s.in_channels;
      acts = s.out_channels;
    }
    r.parameters += params;
    r.macs += macs;
    energy_total += energy.mac_mj * static_cast<double>(macs) + energy.mem_mj * static_cast<double>(params + acts);
  }
  r.energy_mj = energy_total;
  return r;
}

CostReport count_cost(const Network& net, int input_size, const EnergyModel& energy) {
  return count_cost(net.architecture(), input_size, energy);
}

// ---------------------------------------------------------------------------
// Construction

Network make_network(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  std::mt19937_64 rng(seed);
  Network net;
  net.input_channels = arch.input_channels;
  net.input_size = arch.input_size;
  for (const auto& spec : arch.layers) {
    Layer l;
    l.spec = spec;
    const Index k2 = spec.is_conv() ? static_cast<Index>(spec.kernel) * spec.kernel : 1;
    const Index fan_in = spec.in_channels * k2;
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    l.weight.resize(spec.out_channels, fan_in);
    for (Index t = 0; t < l.weight.size(); ++t) l.weight.data()[t] = dist(rng);
    l.bias = VectorXd::Zero(spec.out_channels);
    net.layers.push_back(std::move(l));
  }
  return net;
}

Architecture toy_backbone(const std::vector<int>& widths, int classes, int input_channels, int input_size,
                          double head_dropout) {
  if (widths.empty()) throw ArgumentError("backbone needs at least one conv layer");
  Architecture a;
  a.input_channels = input_channels;
  a.input_size = input_size;
  int in = input_channels;
  for (std::size_t i = 0; i < widths.size(); ++i) {
    LayerSpec s;
    s.name = "conv" + std::to_string(i + 1);
    s.kind = LayerKind::Conv;
    s.in_channels = in;
    s.out_channels = widths[i];
    s.kernel = 3;
    s.pool_after = true;
    a.layers.push_back(s);
    in = widths[i];
  }
  LayerSpec head;
  head.name = "fc";
  head.kind = LayerKind::FullyConnected;
  head.in_channels = in;
  head.out_channels = classes;
  head.dropout = head_dropout;
  a.layers.push_back(head);
  a.validate();
  return a;
}

Architecture resnet18_reference(int classes) {
  Architecture a;
  a.input_channels = 3;
  a.input_size = 224;
  auto conv = [&](const std::string& name, int in, int out, int k, int stride, int from = -1, bool pool = false) {
    LayerSpec s;
    s.name = name;
    s.in_channels = in;
    s.out_channels = out;
    s.kernel = k;
    s.stride = stride;
    s.input_from = from;
    s.pool_after = pool;
    a.layers.push_back(s);
    return static_cast<int>(a.layers.size()) - 1;
  };
  int prev = conv("conv1", 3, 64, 7, 2, -1, true);  // stem max-pool modelled as 2x2
  int width = 64;
  const int widths[] = {64, 128, 256, 512};
  for (int stage = 0; stage < 4; ++stage) {
    const int out = widths[stage];
    const int stride = stage == 0 ? 1 : 2;
    const std::string p = "layer" + std::to_string(stage + 1);
    const int block_in = prev;
    const int a1 = conv(p + ".0.conv1", width, out, 3, stride, prev);
    const int a2 = conv(p + ".0.conv2", out, out, 3, 1, a1);
    if (stride != 1 || width != out) conv(p + ".0.downsample", width, out, 1, stride, block_in);
    const int b1 = conv(p + ".1.conv1", out, out, 3, 1, a2);
    prev = conv(p + ".1.conv2", out, out, 3, 1, b1);
    width = out;
  }
  LayerSpec fc;
  fc.name = "fc";
  fc.kind = LayerKind::FullyConnected;
  fc.in_channels = 512;
  fc.out_channels = classes;
  fc.input_from = prev;
  a.layers.push_back(fc);
  a.validate();
  return a;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kCheckpointMagic = "PMPCKPT1";

nlohmann::json spec_to_json(const LayerSpec& s) {
  return {{"name", s.name},
          {"kind", s.is_conv() ? "conv" : "fc"},
          {"in_channels", s.in_channels},
          {"out_channels", s.out_channels},
          {"kernel", s.kernel},
          {"stride", s.stride},
          {"pool_after", s.pool_after},
          {"dropout", s.dropout},
          {"input_from", s.input_from}};
}

LayerSpec spec_from_json(const nlohmann::json& j) {
  LayerSpec s;
  s.name = j.at("name").get<std::string>();
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "conv") {
    s.kind = LayerKind::Conv;
  } else if (kind == "fc") {
    s.kind = LayerKind::FullyConnected;
  } else {
    throw StructuralError("unknown layer kind '" + kind + "'");
  }
  s.in_channels = j.at("in_channels").get<int>();
  s.out_channels = j.at("out_channels").get<int>();
  s.kernel = j.at("kernel").get<int>();
  s.stride = j.at("stride").get<int>();
  s.pool_after = j.at("pool_after").get<bool>();
  s.dropout = j.at("dropout").get<double>();
  s.input_from = j.at("input_from").get<int>();
  return s;
}

}  // namespace

void save_checkpoint(const Network& net, const std::string& path) {
  static_assert(std::endian::native == std::endian::little, "checkpoints are little-endian");
  nlohmann::json header;
  header["format"] = "pmp-checkpoint";
  header["version"] = 1;
  header["dtype"] = "f64-le";
  header["input_channels"] = net.input_channels;
  header["input_size"] = net.input_size;
  std::int64_t offset = 0;
  auto layers = nlohmann::json::array();
  for (const auto& l : net.layers) {
    auto j = spec_to_json(l.spec);
    j["weight_shape"] = {l.weight.rows(), l.weight.cols()};
    j["weight_offset"] = offset;
    offset += l.weight.size();
    j["bias_offset"] = offset;
    offset += l.bias.size();
    layers.push_back(std::move(j));
  }
  header["layers"] = std::move(layers);
  header["values"] = offset;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out << kCheckpointMagic << "\n" << header.dump() << "\n";
  for (const auto& l : net.layers) {
    out.write(reinterpret_cast<const char*>(l.weight.data()), static_cast<std::streamsize>(l.weight.size() * 8));
    out.write(reinterpret_cast<const char*>(l.bias.data()), static_cast<std::streamsize>(l.bias.size() * 8));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

Network load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path);
  std::string magic, header_line;
  std::getline(in, magic);
  if (magic != kCheckpointMagic) throw StructuralError("'" + path + "' is not a checkpoint");
  std::getline(in, header_line);
  const auto header = nlohmann::json::parse(header_line);
  Network net;
  net.input_channels = header.at("input_channels").get<int>();
  net.input_size = header.at("input_size").get<int>();
  for (const auto& j : header.at("layers")) {
    Layer l;
    l.spec = spec_from_json(j);
    const auto shape = j.at("weight_shape");
    l.weight.resize(shape[0].get<Index>(), shape[1].get<Index>());
    l.bias.resize(l.spec.out_channels);
    in.read(reinterpret_cast<char*>(l.weight.data()), static_cast<std::streamsize>(l.weight.size() * 8));
    in.read(reinterpret_cast<char*>(l.bias.data()), static_cast<std::streamsize>(l.bias.size() * 8));
    if (!in) throw StructuralError("checkpoint '" + path + "' is truncated");
    net.layers.push_back(std::move(l));
  }
  net.validate();
  return net;
}

// ---------------------------------------------------------------------------
// Flat parameter views

Eigen::VectorXd flatten_parameters(const Network& net) {
  VectorXd v(net.parameter_count());
  Index o = 0;
  for (const auto& l : net.layers) {
    v.segment(o, l.weight.size()) = l.weight.reshaped();
    o += l.weight.size();
    v.segment(o, l.bias.size()) = l.bias;
    o += l.bias.size();
  }
  return v;
}

void assign_parameters(Network& net, const Eigen::VectorXd& flat) {
  if (flat.size() != net.parameter_count()) throw StructuralError("flat parameter length mismatch");
  Index o = 0;
  for (auto& l : net.layers) {
    l.weight.reshaped() = flat.segment(o, l.weight.size());
    o += l.weight.size();
    l.bias = flat.segment(o, l.bias.size());
    o += l.bias.size();
  }
}

Eigen::VectorXd flatten_gradients(const Gradients& grads) {
  Index total = 0;
  for (std::size_t i = 0; i < grads.weight.size(); ++i) total += grads.weight[i].size() + grads.bias[i].size();
  VectorXd v(total);
  Index o = 0;
  for (std::size_t i = 0; i < grads.weight.size(); ++i) {
    v.segment(o, grads.weight[i].size()) = grads.weight[i].reshaped();
    o += grads.weight[i].size();
    v.segment(o, grads.bias[i].size()) = grads.bias[i];
    o += grads.bias[i].size();
  }
  return v;
}

void apply_gradients(Network& net, const Gradients& grads, double step) {
  if (grads.weight.size() != net.layers.size()) throw StructuralError("gradient layer count mismatch");
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    net.layers[i].weight -= step * grads.weight[i];
    net.layers[i].bias -= step * grads.bias[i];
  }
}

}  // namespace pmp::net
