#pragma once

// Importance tables to channel masks: per-layer thresholds, taxonomy
// protection, and a global parameter budget.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmp/dacis.hpp"
#include "pmp/net.hpp"

namespace pmp::pruner {

// Per layer, one value per output channel of the architecture.
using ChannelScores = std::map<std::string, std::vector<double>>;
using Thresholds = std::map<std::string, double>;
using Protection = std::map<std::string, std::vector<double>>;

// Parameter count of `arch` with only the retained channels present.
std::int64_t retained_parameters(const net::Architecture& arch, const net::ChannelMask& mask);

// One channel per conv layer: the smallest reachable parameter count,
// as a fraction of the full architecture.
double minimal_retention(const net::Architecture& arch);

struct BudgetOptions {
  // Add back the best rejected channels while they fit under the budget.
  bool refill = false;
};

// Greedy budget pass. Starting from `keep`, drops channels in ascending
// (score, layer index, channel index) order until the retained parameter
// count reaches the budget, stopping on whichever side of it is nearer and
// never emptying a layer. Throws InfeasibleTarget when the budget is below
// the one-channel floor.
net::ChannelMask enforce_budget(const net::Architecture& arch, net::ChannelMask keep, const ChannelScores& scores,
                                std::int64_t budget, const BudgetOptions& opts = {});

// Threshold pass (protected score > tau, best channel kept in a layer that
// would otherwise empty), then the budget pass at retention r of the
// architecture's parameters.
net::ChannelMask select_prune_set(const net::Architecture& arch, const ChannelScores& scores,
                                  const Thresholds& thresholds, double retention, const Protection& protection,
                                  const BudgetOptions& opts = {});

// Combined (or refined, when present and requested) DACIS laid out per
// output channel. The table must cover every conv channel of `arch`.
ChannelScores table_scores(const net::Architecture& arch, const dacis::ImportanceTable& table, bool use_refined);

// Baseline scorers: L1 norm of each filter, uniform random values.
ChannelScores magnitude_scores(const net::Network& net);
ChannelScores random_scores(const net::Architecture& arch, std::uint64_t seed);

struct StageOptions {
  Thresholds thresholds;       // missing layers use 0
  Protection protection;       // missing layers use 1.0
  bool use_refined = true;
  double stage1_removal = 0.40;
};

struct StageResult {
  net::Architecture architecture;  // repacked
  net::ChannelMask live_mask;      // over the input (live) architecture
  net::ChannelMask cumulative;     // over the original architecture
  std::int64_t parameters = 0;
  double sparsity = 0.0;           // 1 - parameters / original
};

// Stage 1 removes min(stage1_removal, s) of the original parameters; stage 3
// reaches total sparsity s relative to the original. `prior` maps the live
// architecture's channels onto the original one.
StageResult stage_prune(const net::Architecture& live, const net::ChannelMask& prior,
                        std::int64_t original_parameters, const ChannelScores& scores, int stage,
                        double total_sparsity, const StageOptions& opts);

struct NetworkStageResult {
  net::Network network;
  StageResult stage;
};

NetworkStageResult stage_prune(const net::Network& live, const net::ChannelMask& prior,
                               std::int64_t original_parameters, const dacis::ImportanceTable& table, int stage,
                               double total_sparsity, const StageOptions& opts);

// Layer-wise retention table for dry runs: {layer -> {kept, total, fraction}}.
nlohmann::json retention_table(const net::Architecture& arch, const net::ChannelMask& mask);

}  // namespace pmp::pruner
