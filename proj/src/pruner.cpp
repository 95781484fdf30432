#include "pmp/pruner.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <tuple>

#include <spdlog/spdlog.h>

#include "pmp/errors.hpp"

namespace pmp::pruner {

namespace {

// Retained output channels per layer; fully-connected layers keep all.
std::vector<std::int64_t> retained_counts(const net::Architecture& arch, const net::ChannelMask& mask) {
  std::vector<std::int64_t> out;
  for (const auto& l : arch.layers) {
    auto it = mask.keep.find(l.name);
    if (l.is_conv() && it != mask.keep.end())
      out.push_back(std::count(it->second.begin(), it->second.end(), true));
    else
      out.push_back(l.out_channels);
  }
  return out;
}

std::int64_t count_params(const net::Architecture& arch, const std::vector<std::int64_t>& counts) {
  std::int64_t total = 0;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const auto& l = arch.layers[i];
    const int src = arch.source_of(i);
    const std::int64_t in = src < 0 ? arch.input_channels : counts[static_cast<std::size_t>(src)];
    const std::int64_t k2 = l.is_conv() ? static_cast<std::int64_t>(l.kernel) * l.kernel : 1;
    total += counts[i] * (in * k2 + 1);
  }
  return total;
}

struct Candidate {
  double score;
  std::size_t layer;
  int channel;
};

std::vector<Candidate> candidates(const net::Architecture& arch, const ChannelScores& scores) {
  std::vector<Candidate> out;
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    const auto& l = arch.layers[i];
    if (!l.is_conv()) continue;
    auto it = scores.find(l.name);
    if (it == scores.end()) throw StructuralError("no scores for layer '" + l.name + "'");
    if (static_cast<int>(it->second.size()) != l.out_channels)
      throw StructuralError("score count for layer '" + l.name + "' does not match its channels");
    for (int c = 0; c < l.out_channels; ++c) {
      if (!std::isfinite(it->second[c])) throw NumericalError("non-finite score in layer '" + l.name + "'");
      out.push_back({it->second[c], i, c});
    }
  }
  // Ascending score; ties by lower layer index, then lower channel index.
  std::stable_sort(out.begin(), out.end(), [](const Candidate& a, const Candidate& b) {
    return std::tie(a.score, a.layer, a.channel) < std::tie(b.score, b.layer, b.channel);
  });
  return out;
}

}  // namespace

std::int64_t retained_parameters(const net::Architecture& arch, const net::ChannelMask& mask) {
  return count_params(arch, retained_counts(arch, mask));
}

double minimal_retention(const net::Architecture& arch) {
  std::vector<std::int64_t> counts;
  for (const auto& l : arch.layers) counts.push_back(l.is_conv() ? 1 : l.out_channels);
  return static_cast<double>(count_params(arch, counts)) / static_cast<double>(arch.parameter_count());
}

net::ChannelMask enforce_budget(const net::Architecture& arch, net::ChannelMask keep, const ChannelScores& scores,
                                std::int64_t budget, const BudgetOptions& opts) {
  keep.validate(arch);
  const double floor = minimal_retention(arch);
  const auto total = arch.parameter_count();
  if (static_cast<double>(budget) < floor * static_cast<double>(total)) {
    throw InfeasibleTarget("retention " + std::to_string(static_cast<double>(budget) / total) +
                               " is below the one-channel-per-layer floor " + std::to_string(floor),
                           floor);
  }
  auto order = candidates(arch, scores);
  auto counts = retained_counts(arch, keep);
  std::int64_t params = count_params(arch, counts);

  for (const auto& c : order) {
    if (params <= budget) break;
    const auto& name = arch.layers[c.layer].name;
    auto bit = keep.keep[name][c.channel];
    if (!bit || counts[c.layer] <= 1) continue;
    --counts[c.layer];
    const auto after = count_params(arch, counts);
    // Stop at whichever side of the budget is nearer.
    if (after < budget && budget - after > params - budget) {
      ++counts[c.layer];
      break;
    }
    bit = false;
    params = after;
  }

  if (opts.refill) {
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const auto& name = arch.layers[it->layer].name;
      auto bit = keep.keep[name][it->channel];
      if (bit) continue;
      ++counts[it->layer];
      const auto with = count_params(arch, counts);
      if (with <= budget) {
        bit = true;
        params = with;
      } else {
        --counts[it->layer];
      }
    }
  }
  return keep;
}

net::ChannelMask select_prune_set(const net::Architecture& arch, const ChannelScores& scores,
                                  const Thresholds& thresholds, double retention, const Protection& protection,
                                  const BudgetOptions& opts) {
  if (!(retention > 0.0) || retention > 1.0) throw ArgumentError("retention must lie in (0, 1]");
  ChannelScores protected_scores;
  net::ChannelMask keep = net::ChannelMask::all_true(arch);
  for (const auto& l : arch.layers) {
    if (!l.is_conv()) continue;
    auto sit = scores.find(l.name);
    if (sit == scores.end()) throw StructuralError("no scores for layer '" + l.name + "'");
    if (static_cast<int>(sit->second.size()) != l.out_channels)
      throw StructuralError("score count for layer '" + l.name + "' does not match its channels");
    auto& ps = protected_scores[l.name];
    ps = sit->second;
    if (auto pit = protection.find(l.name); pit != protection.end()) {
      if (pit->second.size() != ps.size())
        throw StructuralError("protection for layer '" + l.name + "' does not match its channels");
      for (std::size_t c = 0; c < ps.size(); ++c) ps[c] *= pit->second[c];
    }
    double tau = 0.0;
    if (auto tit = thresholds.find(l.name); tit != thresholds.end()) tau = tit->second;
    if (tau < 0) throw ArgumentError("thresholds must be non-negative");
    auto& bits = keep.keep[l.name];
    bool any = false;
    for (std::size_t c = 0; c < ps.size(); ++c) {
      bits[c] = ps[c] > tau;
      any = any || bits[c];
    }
    if (!any) {
      // Highest score, lowest index on ties.
      std::size_t best = 0;
      for (std::size_t c = 1; c < ps.size(); ++c)
        if (ps[c] > ps[best]) best = c;
      bits[best] = true;
    }
  }

  const auto budget =
      static_cast<std::int64_t>(std::floor(retention * static_cast<double>(arch.parameter_count()) + 1e-9));
  auto out = enforce_budget(arch, keep, protected_scores, budget, opts);

  int lost = 0;
  for (const auto& [layer, mult] : protection) {
    auto kit = keep.keep.find(layer);
    auto oit = out.keep.find(layer);
    if (kit == keep.keep.end() || oit == out.keep.end()) continue;
    for (std::size_t c = 0; c < mult.size(); ++c)
      if (mult[c] > 1.0 && kit->second[c] && !oit->second[c]) ++lost;
  }
  if (lost > 0) spdlog::warn("{} protected channels dropped to meet the parameter budget", lost);
  return out;
}

ChannelScores table_scores(const net::Architecture& arch, const dacis::ImportanceTable& table, bool use_refined) {
  ChannelScores out;
  for (const auto& l : arch.layers) {
    if (!l.is_conv()) continue;
    const auto& li = table.at(l.name);
    std::vector<double> s(static_cast<std::size_t>(l.out_channels), std::nan(""));
    for (const auto& c : li.channels) {
      if (c.channel < 0 || c.channel >= l.out_channels)
        throw StructuralError("importance table channel out of range in layer '" + l.name + "'");
      s[static_cast<std::size_t>(c.channel)] = (use_refined && c.refined) ? *c.refined : c.dacis;
    }
    for (double v : s)
      if (std::isnan(v)) throw StructuralError("importance table does not cover layer '" + l.name + "'");
    out[l.name] = std::move(s);
  }
  return out;
}

ChannelScores magnitude_scores(const net::Network& net) {
  ChannelScores out;
  for (const auto& l : net.layers) {
    if (!l.spec.is_conv()) continue;
    auto& s = out[l.spec.name];
    for (Eigen::Index c = 0; c < l.weight.rows(); ++c) s.push_back(l.weight.row(c).cwiseAbs().sum());
  }
  return out;
}

ChannelScores random_scores(const net::Architecture& arch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ChannelScores out;
  for (const auto& l : arch.layers) {
    if (!l.is_conv()) continue;
    auto& s = out[l.name];
    for (int c = 0; c < l.out_channels; ++c) s.push_back(static_cast<double>(rng() >> 11) * 0x1.0p-53);
  }
  return out;
}

StageResult stage_prune(const net::Architecture& live, const net::ChannelMask& prior,
                        std::int64_t original_parameters, const ChannelScores& scores, int stage,
                        double total_sparsity, const StageOptions& opts) {
  if (stage != 1 && stage != 3) throw ArgumentError("stage must be 1 or 3");
  if (!(total_sparsity > 0.0) || total_sparsity > 0.95)
    throw ArgumentError("total sparsity must lie in (0, 0.95]");
  if (original_parameters <= 0) throw ArgumentError("original parameter count must be positive");
  const double removal = stage == 1 ? std::min(opts.stage1_removal, total_sparsity) : total_sparsity;
  const double target = (1.0 - removal) * static_cast<double>(original_parameters);
  const double retention = std::min(1.0, target / static_cast<double>(live.parameter_count()));

  Protection protection;
  for (const auto& l : live.layers) {
    if (!l.is_conv()) continue;
    auto it = opts.protection.find(l.name);
    protection[l.name] = it != opts.protection.end()
                             ? it->second
                             : std::vector<double>(static_cast<std::size_t>(l.out_channels), 1.0);
  }
  BudgetOptions bo;
  bo.refill = true;
  StageResult r;
  r.live_mask = select_prune_set(live, scores, opts.thresholds, retention, protection, bo);
  r.architecture = net::repack_architecture(live, r.live_mask);
  r.cumulative = net::compose_masks(prior, r.live_mask);
  r.parameters = r.architecture.parameter_count();
  r.sparsity = 1.0 - static_cast<double>(r.parameters) / static_cast<double>(original_parameters);
  return r;
}

NetworkStageResult stage_prune(const net::Network& live, const net::ChannelMask& prior,
                               std::int64_t original_parameters, const dacis::ImportanceTable& table, int stage,
                               double total_sparsity, const StageOptions& opts) {
  const auto arch = live.architecture();
  auto s = stage_prune(arch, prior, original_parameters, table_scores(arch, table, opts.use_refined), stage,
                       total_sparsity, opts);
  NetworkStageResult out{net::repack_network(live, s.live_mask), std::move(s)};
  return out;
}

nlohmann::json retention_table(const net::Architecture& arch, const net::ChannelMask& mask) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& l : arch.layers) {
    if (!l.is_conv()) continue;
    const int kept = mask.retained(l.name);
    out.push_back({{"layer", l.name},
                   {"kept", kept},
                   {"total", l.out_channels},
                   {"fraction", static_cast<double>(kept) / l.out_channels}});
  }
  return out;
}

}  // namespace pmp::pruner
