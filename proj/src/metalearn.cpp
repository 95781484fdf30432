#include "pmp/metalearn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pmp/errors.hpp"
#include "pmp/random.hpp"

namespace pmp::meta {

Episode sample_episode(const data::Dataset& d, int ways, int shots, int queries, std::uint64_t seed,
                       const std::vector<int>& pool) {
  if (ways < 2 || shots < 1 || queries < 1) throw ArgumentError("episode needs ways >= 2, shots >= 1, queries >= 1");
  std::vector<int> classes = pool;
  if (classes.empty()) {
    classes.resize(static_cast<std::size_t>(d.class_count()));
    std::iota(classes.begin(), classes.end(), 0);
  }
  if (static_cast<int>(classes.size()) < ways)
    throw ArgumentError("class pool has " + std::to_string(classes.size()) + " classes, episode needs " +
                        std::to_string(ways));
  const auto members = d.by_class();
  for (int c : classes) {
    const auto have = static_cast<int>(members.at(static_cast<std::size_t>(c)).size());
    if (have < shots + queries)
      throw ArgumentError("class " + std::to_string(c) + " has " + std::to_string(have) + " samples, episode needs " +
                          std::to_string(shots + queries));
  }

  auto rng = rnd::engine(seed, 0x5eed);
  rnd::shuffle(classes, rng);
  Episode e;
  e.id = seed;
  e.ways = ways;
  e.shots = shots;
  e.queries = queries;
  e.classes.assign(classes.begin(), classes.begin() + ways);
  for (int k = 0; k < ways; ++k) {
    auto idx = members[static_cast<std::size_t>(e.classes[k])];
    rnd::shuffle(idx, rng);
    for (int s = 0; s < shots; ++s) {
      e.support.push_back(idx[s]);
      e.support_labels.push_back(k);
    }
    for (int q = 0; q < queries; ++q) {
      e.query.push_back(idx[shots + q]);
      e.query_labels.push_back(k);
    }
  }
  return e;
}

namespace {

Eigen::MatrixXd prototypes(const Eigen::MatrixXd& support, const std::vector<int>& labels, int ways,
                           Eigen::VectorXd& counts) {
  if (static_cast<Eigen::Index>(labels.size()) != support.rows())
    throw StructuralError("support labels do not match support rows");
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(ways, support.cols());
  counts = Eigen::VectorXd::Zero(ways);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= ways) throw ArgumentError("support label out of range");
    p.row(labels[i]) += support.row(static_cast<Eigen::Index>(i));
    counts(labels[i]) += 1.0;
  }
  for (int k = 0; k < ways; ++k) {
    if (counts(k) == 0) throw ArgumentError("class " + std::to_string(k) + " has no support sample");
    p.row(k) /= counts(k);
  }
  return p;
}

Eigen::MatrixXd neg_sq_dist(const Eigen::MatrixXd& q, const Eigen::MatrixXd& p) {
  Eigen::MatrixXd l = 2.0 * q * p.transpose();
  l.colwise() -= q.rowwise().squaredNorm();
  l.rowwise() -= p.rowwise().squaredNorm().transpose();
  return l;
}

}  // namespace

PrototypeResult prototype_classify(const Eigen::MatrixXd& support, const std::vector<int>& support_labels, int ways,
                                   const Eigen::MatrixXd& query) {
  if (query.cols() != support.cols()) throw StructuralError("query and support dimensions differ");
  Eigen::VectorXd counts;
  const auto p = prototypes(support, support_labels, ways, counts);
  PrototypeResult r;
  r.logits = neg_sq_dist(query, p);
  for (Eigen::Index i = 0; i < query.rows(); ++i) {
    Eigen::Index best = 0;
    r.logits.row(i).maxCoeff(&best);  // first maximum, i.e. the lower class index on ties
    r.predicted.push_back(static_cast<int>(best));
  }
  return r;
}

PrototypeLoss prototype_loss(const Eigen::MatrixXd& support, const std::vector<int>& support_labels, int ways,
                             const Eigen::MatrixXd& query, const std::vector<int>& query_labels) {
  if (query.cols() != support.cols()) throw StructuralError("query and support dimensions differ");
  Eigen::VectorXd counts;
  const auto p = prototypes(support, support_labels, ways, counts);
  const auto logits = neg_sq_dist(query, p);
  const auto ce = net::softmax_cross_entropy(logits, query_labels);
  const Eigen::MatrixXd& g = ce.grad;  // [queries x ways]

  PrototypeLoss out;
  out.loss = ce.loss;
  int right = 0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    logits.row(i).maxCoeff(&best);
    right += best == query_labels[static_cast<std::size_t>(i)];
  }
  out.accuracy = logits.rows() ? double(right) / double(logits.rows()) : 0.0;

  // logit_qk = -|q - p_k|^2
  const Eigen::VectorXd gsum_rows = g.rowwise().sum();
  out.grad_query = 2.0 * (g * p) - 2.0 * (query.array().colwise() * gsum_rows.array()).matrix();
  const Eigen::VectorXd gsum_cols = g.colwise().sum().transpose();
  Eigen::MatrixXd grad_p = 2.0 * (g.transpose() * query) - 2.0 * (p.array().colwise() * gsum_cols.array()).matrix();
  out.grad_support.resize(support.rows(), support.cols());
  for (std::size_t i = 0; i < support_labels.size(); ++i) {
    const int k = support_labels[i];
    out.grad_support.row(static_cast<Eigen::Index>(i)) = grad_p.row(k) / counts(k);
  }
  return out;
}

Eigen::VectorXd inner_step(const Eigen::VectorXd& theta, const GradFn& support_grad, double alpha) {
  const Eigen::VectorXd g = support_grad(theta);
  if (g.size() != theta.size()) throw StructuralError("gradient size does not match parameters");
  return theta - alpha * g;
}

Eigen::VectorXd outer_step(const Eigen::VectorXd& theta, const std::vector<Eigen::VectorXd>& adapted,
                           const std::vector<GradFn>& query_grads, double beta) {
  if (adapted.size() != query_grads.size()) throw StructuralError("one query gradient per adapted task required");
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(theta.size());
  for (std::size_t i = 0; i < adapted.size(); ++i) {
    const Eigen::VectorXd g = query_grads[i](adapted[i]);
    if (g.size() != theta.size()) throw StructuralError("gradient size does not match parameters");
    sum += g;
  }
  return theta - beta * sum;
}

MetaState MetaState::start(net::Network params, const MetaSettings& s) {
  if (!(s.alpha >= 0) || !(s.beta >= 0)) throw ConfigError("meta learning rates must be non-negative");
  MetaState st;
  st.params = std::move(params);
  st.alpha = s.alpha;
  st.beta = s.beta;
  st.signed_accumulator = s.signed_accumulator;
  for (const auto& l : st.params.layers) {
    if (!l.spec.is_conv()) continue;
    st.norm_sum[l.spec.name] = Eigen::VectorXd::Zero(l.weight.rows());
    st.signed_sum[l.spec.name] = Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols());
  }
  return st;
}

std::map<std::string, Eigen::VectorXd> MetaState::g_meta() const {
  if (!signed_accumulator) return norm_sum;
  std::map<std::string, Eigen::VectorXd> out;
  for (const auto& [name, m] : signed_sum) out[name] = m.rowwise().norm();
  return out;
}

EpisodeLoss episode_loss(const net::Network& net, const data::Dataset& d, const Episode& e, bool on_support) {
  std::vector<int> idx = e.support;
  if (!on_support) idx.insert(idx.end(), e.query.begin(), e.query.end());
  const auto batch = d.gather(idx, std::vector<int>(idx.size(), 0));
  net::ForwardOptions fo;
  fo.keep_cache = true;
  fo.stop_at_embedding = true;
  const auto fwd = net::forward(net, batch, fo);
  const auto ns = static_cast<Eigen::Index>(e.support.size());
  const Eigen::MatrixXd s = fwd.embedding.topRows(ns);

  EpisodeLoss out;
  Eigen::MatrixXd grad(fwd.embedding.rows(), fwd.embedding.cols());
  if (on_support) {
    auto pl = prototype_loss(s, e.support_labels, e.ways, s, e.support_labels);
    grad = pl.grad_support + pl.grad_query;
    out.loss = pl.loss;
    out.accuracy = pl.accuracy;
  } else {
    const Eigen::MatrixXd q = fwd.embedding.bottomRows(fwd.embedding.rows() - ns);
    auto pl = prototype_loss(s, e.support_labels, e.ways, q, e.query_labels);
    grad.topRows(ns) = pl.grad_support;
    grad.bottomRows(q.rows()) = pl.grad_query;
    out.loss = pl.loss;
    out.accuracy = pl.accuracy;
  }
  if (!std::isfinite(out.loss)) throw NumericalError("non-finite loss on episode " + std::to_string(e.id));
  out.grads = net::backward_from_embedding(net, fwd, grad);
  return out;
}

net::Network inner_adapt(const MetaState& state, const data::Dataset& d, const Episode& e) {
  auto l = episode_loss(state.params, d, e, true);
  net::Network adapted = state.params;
  net::apply_gradients(adapted, l.grads, state.alpha);
  return adapted;
}

nlohmann::json OuterRecord::to_json() const {
  return {{"step", step},
          {"episodes", episode_ids},
          {"support_loss", support_loss},
          {"query_loss", query_loss},
          {"query_accuracy", query_accuracy}};
}

OuterRecord outer_update(MetaState& state, const data::Dataset& d, const std::vector<Episode>& batch) {
  if (batch.empty()) throw ArgumentError("outer update needs at least one episode");
  OuterRecord rec;
  auto total = net::Gradients::zeros_like(state.params);
  std::vector<net::Gradients> per_episode;
  for (const auto& e : batch) {
    auto support = episode_loss(state.params, d, e, true);
    net::Network adapted = state.params;
    net::apply_gradients(adapted, support.grads, state.alpha);
    auto query = episode_loss(adapted, d, e, false);
    rec.episode_ids.push_back(e.id);
    rec.support_loss.push_back(support.loss);
    rec.query_loss.push_back(query.loss);
    rec.query_accuracy.push_back(query.accuracy);
    total.add(query.grads);
    per_episode.push_back(std::move(query.grads));
  }
  if (!total.all_finite()) throw NumericalError("non-finite meta-gradient; outer update skipped");

  net::apply_gradients(state.params, total, state.beta);
  for (std::size_t li = 0; li < state.params.layers.size(); ++li) {
    const auto& spec = state.params.layers[li].spec;
    if (!spec.is_conv()) continue;
    for (const auto& g : per_episode) {
      if (state.signed_accumulator)
        state.signed_sum[spec.name] += g.weight[li];
      else
        state.norm_sum[spec.name] += g.weight[li].rowwise().norm();
    }
  }
  state.episodes += static_cast<std::int64_t>(batch.size());
  rec.step = state.episodes / static_cast<std::int64_t>(batch.size());
  return rec;
}

dacis::ImportanceTable refine_dacis(const dacis::ImportanceTable& scores,
                                    const std::map<std::string, Eigen::VectorXd>& g_meta, double gamma,
                                    RefineForm form) {
  if (!(gamma >= 0)) throw ArgumentError("refinement gain must be non-negative");
  dacis::ImportanceTable out = scores;
  for (auto& layer : out.layers) {
    auto it = g_meta.find(layer.layer);
    if (it == g_meta.end()) throw LookupError("no meta-gradient for layer " + layer.layer);
    const Eigen::VectorXd& g = it->second;
    if (g.size() != static_cast<Eigen::Index>(layer.channels.size()))
      throw StructuralError("meta-gradient size does not match layer " + layer.layer);
    if (!g.allFinite()) throw NumericalError("non-finite meta-gradient in layer " + layer.layer);
    const double lo = g.minCoeff(), hi = g.maxCoeff();
    const double amax = g.cwiseAbs().maxCoeff();
    for (std::size_t c = 0; c < layer.channels.size(); ++c) {
      auto& ch = layer.channels[c];
      const double v = g(static_cast<Eigen::Index>(c));
      if (form == RefineForm::Scaled) {
        const double gn = hi > lo ? (v - lo) / (hi - lo) : 0.0;
        ch.refined = ch.dacis * (1.0 + gamma * gn);
      } else {
        ch.refined = amax > 0 ? ch.dacis * std::abs(v) / amax : 0.0;
      }
    }
  }
  return out;
}

Eigen::MatrixXd embed(const net::Network& net, const data::Dataset& d, const std::vector<int>& idx,
                      const net::ChannelMask* mask) {
  constexpr std::size_t chunk = 128;
  Eigen::MatrixXd out(static_cast<Eigen::Index>(idx.size()), net.embedding_dim());
  net::ForwardOptions fo;
  fo.mask = mask;
  fo.stop_at_embedding = true;
  for (std::size_t start = 0; start < idx.size(); start += chunk) {
    const std::size_t n = std::min(chunk, idx.size() - start);
    std::vector<int> part(idx.begin() + static_cast<std::ptrdiff_t>(start),
                          idx.begin() + static_cast<std::ptrdiff_t>(start + n));
    const auto fwd = net::forward(net, d.gather(part), fo);
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(n)) = fwd.embedding;
  }
  return out;
}

double episode_accuracy(const net::Network& net, const data::Dataset& d, const Episode& e, int adapt_steps,
                        double alpha) {
  net::Network model = net;
  for (int s = 0; s < adapt_steps; ++s) {
    auto l = episode_loss(model, d, e, true);
    net::apply_gradients(model, l.grads, alpha);
  }
  const auto s = embed(model, d, e.support);
  const auto q = embed(model, d, e.query);
  const auto r = prototype_classify(s, e.support_labels, e.ways, q);
  int right = 0;
  for (std::size_t i = 0; i < r.predicted.size(); ++i) right += r.predicted[i] == e.query_labels[i];
  return r.predicted.empty() ? 0.0 : double(right) / double(r.predicted.size());
}

namespace {

void flip_horizontal(net::Batch& b, std::vector<bool> which) {
  const Eigen::Index hw = static_cast<Eigen::Index>(b.height) * b.width;
  for (int i = 0; i < b.count(); ++i) {
    if (!which[static_cast<std::size_t>(i)]) continue;
    for (int y = 0; y < b.height; ++y)
      for (int x = 0; x < b.width / 2; ++x) {
        const Eigen::Index a = i * hw + y * b.width + x, c = i * hw + y * b.width + (b.width - 1 - x);
        b.data.col(a).swap(b.data.col(c));
      }
  }
}

}  // namespace

std::vector<EpochRecord> train_supervised(net::Network& net, const data::Dataset& d, const TrainSettings& s) {
  if (s.epochs < 0 || s.batch_size < 1 || !(s.learning_rate > 0)) throw ConfigError("invalid training settings");
  for (int l : d.labels)
    if (l >= net.class_count()) throw ArgumentError("label exceeds the classifier head");
  auto velocity = net::Gradients::zeros_like(net);
  auto second = net::Gradients::zeros_like(net);
  std::int64_t step = 0;
  auto rng = rnd::engine(s.seed, 0x7a1);
  std::mt19937_64 drop(rnd::derive_seed(s.seed, 0xd40));
  std::vector<int> order(static_cast<std::size_t>(d.count()));
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochRecord> log;
  for (int ep = 0; ep < s.epochs; ++ep) {
    rnd::shuffle(order, rng);
    double loss_sum = 0.0;
    int right = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(s.batch_size)) {
      const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(s.batch_size), order.size() - start);
      std::vector<int> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                           order.begin() + static_cast<std::ptrdiff_t>(start + n));
      auto batch = d.gather(idx);
      if (s.augment) {
        std::vector<bool> which(n);
        for (std::size_t i = 0; i < n; ++i) which[i] = rng() & 1;
        flip_horizontal(batch, which);
      }
      net::ForwardOptions fo;
      fo.mode = net::Mode::Stochastic;
      fo.rng = &drop;
      fo.keep_cache = true;
      const auto fwd = net::forward(net, batch, fo);
      const auto ce = net::softmax_cross_entropy(fwd.logits, batch.labels);
      auto g = net::backward_from_logits(net, fwd, ce.grad);
      if (!g.all_finite()) throw NumericalError("non-finite gradient during training");
      for (std::size_t li = 0; li < net.layers.size(); ++li) g.weight[li] += s.weight_decay * net.layers[li].weight;
      if (s.optimizer == Optimizer::Sgd) {
        velocity.scale(s.momentum);
        velocity.add(g);
        net::apply_gradients(net, velocity, s.learning_rate);
      } else {
        ++step;
        const double c1 = 1.0 - std::pow(s.momentum, double(step)), c2 = 1.0 - std::pow(s.beta2, double(step));
        for (std::size_t li = 0; li < net.layers.size(); ++li) {
          auto adam = [&](auto& m, auto& v, const auto& grad, auto& param) {
            m = s.momentum * m + (1.0 - s.momentum) * grad;
            v = s.beta2 * v + (1.0 - s.beta2) * grad.cwiseProduct(grad);
            param.array() -= s.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + 1e-8);
          };
          adam(velocity.weight[li], second.weight[li], g.weight[li], net.layers[li].weight);
          adam(velocity.bias[li], second.bias[li], g.bias[li], net.layers[li].bias);
        }
      }
      loss_sum += ce.loss * double(n);
      for (Eigen::Index i = 0; i < fwd.logits.rows(); ++i) {
        Eigen::Index best = 0;
        fwd.logits.row(i).maxCoeff(&best);
        right += best == batch.labels[static_cast<std::size_t>(i)];
      }
    }
    log.push_back({ep + 1, loss_sum / std::max(1, d.count()), double(right) / std::max(1, d.count())});
  }
  return log;
}

double classification_accuracy(const net::Network& net, const data::Dataset& d) {
  if (d.count() == 0) return 0.0;
  int right = 0;
  constexpr int chunk = 128;
  std::vector<int> idx;
  for (int start = 0; start < d.count(); start += chunk) {
    idx.clear();
    for (int i = start; i < std::min(d.count(), start + chunk); ++i) idx.push_back(i);
    const auto fwd = net::forward(net, d.gather(idx));
    for (Eigen::Index i = 0; i < fwd.logits.rows(); ++i) {
      Eigen::Index best = 0;
      fwd.logits.row(i).maxCoeff(&best);
      right += best == d.labels[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
    }
  }
  return double(right) / d.count();
}

}  // namespace pmp::meta
