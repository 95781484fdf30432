#pragma once

// Experiment driver: the three-stage pipeline, SAMS capacity regimes,
// ablation variants and report emission.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pmp/dacis.hpp"
#include "pmp/datagen.hpp"
#include "pmp/evalstats.hpp"
#include "pmp/metalearn.hpp"
#include "pmp/net.hpp"
#include "pmp/objective.hpp"
#include "pmp/taxonomy.hpp"

namespace pmp::pipeline {

struct DataConfig {
  datagen::GenSpec gen;            // used when `path` is empty
  int samples_per_class = 40;
  std::vector<int> novel_fine = {3, 4};  // generated data: held-out lesion geometries
  std::string path;                // class-named image directories
  std::vector<std::string> novel_classes;  // ingested data: held-out class names
  int image_size = 32;
  double test_fraction = 0.2;      // of each base class, held out for testing
};

struct EvalConfig {
  int ways = 5;
  std::vector<int> shots = {1, 5};
  int queries = 15;
  int episodes = 1000;
  std::uint64_t episode_seed = 2024;  // one fixed benchmark across run seeds
  int adapt_steps = 0;
  int mc_passes = 20;
  double flag_threshold = 0.15;
};

enum class Mode { ThreeStage, TwoStage, SingleStage };

struct PipelineConfig {
  DataConfig data;
  std::vector<int> widths = {4, 8, 16, 16};
  double head_dropout = 0.2;
  meta::TrainSettings pretrain;
  double finetune_rate = 0.001;
  dacis::DacisWeights weights;
  dacis::ThresholdParams thresholds;
  bool layer_adaptive = true;
  bool protection = true;
  int scoring_per_class = 16;
  int hessian_samples = 64;
  double gamma = 1.0;
  meta::RefineForm refine_form = meta::RefineForm::Scaled;
  bool use_meta_gradient = true;
  meta::MetaSettings meta;
  int meta_episodes = 4000;
  double stage1_removal = 0.40;
  double sparsity = 0.78;
  int e1 = 3, e2 = 3;
  Mode mode = Mode::ThreeStage;
  objective::ObjectiveWeights objective;
  std::vector<std::uint64_t> seeds = {42};
  EvalConfig eval;
  std::string output_dir = "runs";
  nlohmann::json lambda_grids;

  PipelineConfig();
  // Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  // Missing keys keep their defaults; unknown keys are rejected.
  static PipelineConfig from_json(const nlohmann::json& j);
  static PipelineConfig load(const std::string& path);
};

// Both λ search presets: the 9-point grid and the 36-point simplex grid.
nlohmann::json default_lambda_grids();

// Applies an ablation variant by name; throws ArgumentError listing the
// valid names when unknown.
PipelineConfig apply_variant(const PipelineConfig& base, const std::string& variant);
const std::vector<std::string>& variant_names();

// ---------------------------------------------------------------------------

struct PreparedData {
  data::Dataset all;             // every class, original labels
  data::Dataset base_train;      // base classes relabelled 0..B-1
  data::Dataset base_test;
  std::vector<int> base_classes, novel_classes;  // labels in `all`
  taxonomy::Taxonomy base_taxonomy;              // ids follow base_train labels
  nlohmann::json hashes;
};

PreparedData prepare_data(const DataConfig& cfg);

// Supervised pre-training of the full backbone on the base classes.
net::Network pretrain(const PipelineConfig& cfg, const PreparedData& data, std::uint64_t seed);

// Scoring batch: the first `scoring_per_class` samples of each base class.
net::Batch scoring_batch(const PipelineConfig& cfg, const PreparedData& data);

// DACIS table, per-layer thresholds and protection multipliers for `net`.
struct StageScores {
  dacis::ImportanceTable table;
  std::map<std::string, double> thresholds;
  std::map<std::string, std::vector<double>> protection;
  double task_complexity = 0.0;
};
StageScores score_stage(const PipelineConfig& cfg, const PreparedData& data, const net::Network& net,
                        std::uint64_t seed);

// Per-episode accuracies (percent) on the novel classes. Episodes depend
// only on eval.episode_seed and the shot count.
stats::EpisodicResult evaluate_novel(const PipelineConfig& cfg, const PreparedData& data, const net::Network& net,
                                     int shots);

struct RunResult {
  net::Network network;
  net::ChannelMask mask;  // cumulative over the original backbone
  nlohmann::json metrics;  // deterministic
  nlohmann::json timing;   // wall-clock dependent
  std::map<int, stats::EpisodicResult> novel;  // by shot count
};

struct RunOptions {
  std::string output_dir;  // empty: no files
  const PreparedData* data = nullptr;  // prepared when null
  const net::Network* pretrained = nullptr;  // trained when null
};

RunResult run_pmp(const PipelineConfig& cfg, std::uint64_t seed, const RunOptions& opts = {});

// Shot regime -> total sparsity: 1 -> 0.30, 5 -> 0.55, 10 -> 0.78.
double sams_sparsity(int shots);
nlohmann::json run_sams(const PipelineConfig& cfg, const std::vector<int>& regimes, const std::string& output_dir);

// Baseline and each variant under identical seeds, data and episodes, with
// paired tests on the per-episode accuracies.
nlohmann::json run_ablation(const PipelineConfig& cfg, const std::vector<std::string>& variants,
                            const std::string& output_dir);

// Human-readable rendering of a run, SAMS or ablation result.
std::string render_markdown(const nlohmann::json& result);

}  // namespace pmp::pipeline
