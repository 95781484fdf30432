#include "pmp/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include <spdlog/spdlog.h>

#include "pmp/errors.hpp"
#include "pmp/pruner.hpp"
#include "pmp/random.hpp"
#include "pmp/uncertainty.hpp"

namespace pmp::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

namespace {

const char* mode_name(Mode m) {
  switch (m) {
    case Mode::ThreeStage: return "three-stage";
    case Mode::TwoStage: return "two-stage";
    default: return "single-stage";
  }
}

Mode parse_mode(const std::string& s) {
  if (s == "three-stage") return Mode::ThreeStage;
  if (s == "two-stage") return Mode::TwoStage;
  if (s == "single-stage") return Mode::SingleStage;
  throw ConfigError("unknown mode '" + s + "' (three-stage, two-stage, single-stage)");
}

class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be an object");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  std::optional<Reader> sub(const std::string& key) {
    if (!j_.contains(key)) return std::nullopt;
    used_.insert(key);
    return Reader(j_.at(key), where_ + "." + key);
  }

  const json* raw(const std::string& key) {
    if (!j_.contains(key)) return nullptr;
    used_.insert(key);
    return &j_.at(key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!used_.count(k)) throw ConfigError("unknown configuration key " + where_ + "." + k);
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

json train_json(const meta::TrainSettings& t) {
  return {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"optimizer", t.optimizer == meta::Optimizer::Adam ? "adam" : "sgd"},
          {"learning_rate", t.learning_rate},
          {"momentum", t.momentum},
          {"beta2", t.beta2},
          {"weight_decay", t.weight_decay},
          {"augment", t.augment}};
}

void read_train(Reader r, meta::TrainSettings& t) {
  r.get("epochs", t.epochs);
  r.get("batch_size", t.batch_size);
  std::string opt = t.optimizer == meta::Optimizer::Adam ? "adam" : "sgd";
  r.get("optimizer", opt);
  if (opt == "adam")
    t.optimizer = meta::Optimizer::Adam;
  else if (opt == "sgd")
    t.optimizer = meta::Optimizer::Sgd;
  else
    throw ConfigError("unknown optimizer '" + opt + "' (adam, sgd)");
  r.get("learning_rate", t.learning_rate);
  r.get("momentum", t.momentum);
  r.get("beta2", t.beta2);
  r.get("weight_decay", t.weight_decay);
  r.get("augment", t.augment);
  r.finish();
}

}  // namespace

json default_lambda_grids() {
  json nine = json::array();
  for (const auto& w : std::vector<std::array<double, 3>>{{0.3, 0.2, 0.5},
                                                         {0.2, 0.3, 0.5},
                                                         {0.4, 0.2, 0.4},
                                                         {0.3, 0.3, 0.4},
                                                         {0.2, 0.2, 0.6},
                                                         {0.5, 0.2, 0.3},
                                                         {0.4, 0.4, 0.2},
                                                         {0.2, 0.5, 0.3},
                                                         {1.0 / 3, 1.0 / 3, 1.0 / 3}})
    nine.push_back(w);
  json simplex = json::array();
  for (int a = 1; a <= 8; ++a)
    for (int b = 1; a + b <= 9; ++b) simplex.push_back({a / 10.0, b / 10.0, (10 - a - b) / 10.0});
  return {{"nine_point", nine}, {"simplex", simplex}};
}

PipelineConfig::PipelineConfig() {
  data.gen.seed = 7;
  pretrain.epochs = 30;
  pretrain.augment = true;
  lambda_grids = default_lambda_grids();
}

void PipelineConfig::validate() const {
  data.gen.validate();
  if (data.samples_per_class < 2) throw ConfigError("data.samples_per_class must be at least 2");
  if (!(data.test_fraction > 0 && data.test_fraction < 1)) throw ConfigError("data.test_fraction must lie in (0,1)");
  if (widths.empty()) throw ConfigError("widths must not be empty");
  for (int w : widths)
    if (w < 1) throw ConfigError("widths must be positive");
  if (!(head_dropout >= 0 && head_dropout < 1)) throw ConfigError("head_dropout must lie in [0,1)");
  try {
    weights.validate();
    thresholds.validate();
    objective.validate();
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (!(sparsity > 0 && sparsity <= 0.95)) throw ConfigError("sparsity must lie in (0, 0.95]");
  if (!(stage1_removal > 0 && stage1_removal < 1)) throw ConfigError("stage1_removal must lie in (0,1)");
  if (e1 < 0 || e2 < 0) throw ConfigError("fine-tune epochs must be non-negative");
  if (meta_episodes < 0) throw ConfigError("meta_episodes must be non-negative");
  if (meta.meta_batch < 1) throw ConfigError("meta.meta_batch must be positive");
  if (!(meta.alpha >= 0 && meta.beta >= 0)) throw ConfigError("meta learning rates must be non-negative");
  if (!(gamma >= 0)) throw ConfigError("gamma must be non-negative");
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (eval.shots.empty() || eval.episodes < 2 || eval.ways < 2 || eval.queries < 1)
    throw ConfigError("eval needs shots, ways >= 2, queries >= 1 and at least 2 episodes");
  if (scoring_per_class < 3) throw ConfigError("scoring_per_class must be at least 3");
  if (pretrain.epochs < 0 || pretrain.batch_size < 1 || !(pretrain.learning_rate > 0) || !(finetune_rate > 0))
    throw ConfigError("invalid training settings");
}

json PipelineConfig::to_json() const {
  return {{"data",
           {{"generator", data.gen.to_json()},
            {"samples_per_class", data.samples_per_class},
            {"novel_fine", data.novel_fine},
            {"path", data.path},
            {"novel_classes", data.novel_classes},
            {"image_size", data.image_size},
            {"test_fraction", data.test_fraction}}},
          {"widths", widths},
          {"head_dropout", head_dropout},
          {"pretrain", train_json(pretrain)},
          {"finetune_rate", finetune_rate},
          {"dacis",
           {{"gradient", weights.gradient},
            {"variance", weights.variance},
            {"fisher", weights.fisher},
            {"eta", weights.eta},
            {"hutchinson_probes", weights.hutchinson_probes}}},
          {"thresholds",
           {{"tau_base", thresholds.tau_base},
            {"depth_gain", thresholds.depth_gain},
            {"complexity_gain", thresholds.complexity_gain}}},
          {"layer_adaptive", layer_adaptive},
          {"protection", protection},
          {"scoring_per_class", scoring_per_class},
          {"hessian_samples", hessian_samples},
          {"gamma", gamma},
          {"refine_form", refine_form == meta::RefineForm::Scaled ? "scaled" : "product"},
          {"use_meta_gradient", use_meta_gradient},
          {"meta",
           {{"alpha", meta.alpha},
            {"beta", meta.beta},
            {"ways", meta.ways},
            {"shots", meta.shots},
            {"queries", meta.queries},
            {"meta_batch", meta.meta_batch},
            {"signed_accumulator", meta.signed_accumulator},
            {"episodes", meta_episodes}}},
          {"stage1_removal", stage1_removal},
          {"sparsity", sparsity},
          {"e1", e1},
          {"e2", e2},
          {"mode", mode_name(mode)},
          {"objective",
           {{"lambda_c", objective.lambda_c},
            {"lambda_g", objective.lambda_g},
            {"alpha0", objective.alpha0},
            {"alpha1", objective.alpha1},
            {"alpha2", objective.alpha2}}},
          {"seeds", seeds},
          {"eval",
           {{"ways", eval.ways},
            {"shots", eval.shots},
            {"queries", eval.queries},
            {"episodes", eval.episodes},
            {"episode_seed", eval.episode_seed},
            {"adapt_steps", eval.adapt_steps},
            {"mc_passes", eval.mc_passes},
            {"flag_threshold", eval.flag_threshold}}},
          {"output_dir", output_dir},
          {"lambda_grids", lambda_grids}};
}

PipelineConfig PipelineConfig::from_json(const json& j) {
  PipelineConfig c;
  Reader r(j, "config");
  if (auto d = r.sub("data")) {
    if (const json* g = d->raw("generator")) {
      try {
        c.data.gen = datagen::GenSpec::from_json(*g);
      } catch (const json::exception& e) {
        throw ConfigError(std::string("config.data.generator: ") + e.what());
      }
    }
    d->get("samples_per_class", c.data.samples_per_class);
    d->get("novel_fine", c.data.novel_fine);
    d->get("path", c.data.path);
    d->get("novel_classes", c.data.novel_classes);
    d->get("image_size", c.data.image_size);
    d->get("test_fraction", c.data.test_fraction);
    d->finish();
  }
  r.get("widths", c.widths);
  r.get("head_dropout", c.head_dropout);
  if (auto t = r.sub("pretrain")) read_train(*t, c.pretrain);
  r.get("finetune_rate", c.finetune_rate);
  if (auto d = r.sub("dacis")) {
    d->get("gradient", c.weights.gradient);
    d->get("variance", c.weights.variance);
    d->get("fisher", c.weights.fisher);
    d->get("eta", c.weights.eta);
    d->get("hutchinson_probes", c.weights.hutchinson_probes);
    d->finish();
  }
  if (auto t = r.sub("thresholds")) {
    t->get("tau_base", c.thresholds.tau_base);
    t->get("depth_gain", c.thresholds.depth_gain);
    t->get("complexity_gain", c.thresholds.complexity_gain);
    t->finish();
  }
  r.get("layer_adaptive", c.layer_adaptive);
  r.get("protection", c.protection);
  r.get("scoring_per_class", c.scoring_per_class);
  r.get("hessian_samples", c.hessian_samples);
  r.get("gamma", c.gamma);
  std::string form = c.refine_form == meta::RefineForm::Scaled ? "scaled" : "product";
  r.get("refine_form", form);
  if (form == "scaled")
    c.refine_form = meta::RefineForm::Scaled;
  else if (form == "product")
    c.refine_form = meta::RefineForm::Product;
  else
    throw ConfigError("unknown refine_form '" + form + "' (scaled, product)");
  r.get("use_meta_gradient", c.use_meta_gradient);
  if (auto m = r.sub("meta")) {
    m->get("alpha", c.meta.alpha);
    m->get("beta", c.meta.beta);
    m->get("ways", c.meta.ways);
    m->get("shots", c.meta.shots);
    m->get("queries", c.meta.queries);
    m->get("meta_batch", c.meta.meta_batch);
    m->get("signed_accumulator", c.meta.signed_accumulator);
    m->get("episodes", c.meta_episodes);
    m->finish();
  }
  r.get("stage1_removal", c.stage1_removal);
  r.get("sparsity", c.sparsity);
  r.get("e1", c.e1);
  r.get("e2", c.e2);
  std::string mode = mode_name(c.mode);
  r.get("mode", mode);
  c.mode = parse_mode(mode);
  if (auto o = r.sub("objective")) {
    o->get("lambda_c", c.objective.lambda_c);
    o->get("lambda_g", c.objective.lambda_g);
    o->get("alpha0", c.objective.alpha0);
    o->get("alpha1", c.objective.alpha1);
    o->get("alpha2", c.objective.alpha2);
    o->finish();
  }
  r.get("seeds", c.seeds);
  if (auto e = r.sub("eval")) {
    e->get("ways", c.eval.ways);
    e->get("shots", c.eval.shots);
    e->get("queries", c.eval.queries);
    e->get("episodes", c.eval.episodes);
    e->get("episode_seed", c.eval.episode_seed);
    e->get("adapt_steps", c.eval.adapt_steps);
    e->get("mc_passes", c.eval.mc_passes);
    e->get("flag_threshold", c.eval.flag_threshold);
    e->finish();
  }
  r.get("output_dir", c.output_dir);
  r.get("lambda_grids", c.lambda_grids);
  r.finish();
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open configuration file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("configuration file '" + path + "' is not valid JSON: " + e.what());
  }
  return from_json(j);
}

const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names = {"no-D",         "no-metagrad", "no-layer-adaptive",
                                                 "no-metatrain", "single-stage", "two-stage",
                                                 "G+V",          "V+D",          "G+D",
                                                 "signed-Gmeta", "alg1-refine"};
  return names;
}

PipelineConfig apply_variant(const PipelineConfig& base, const std::string& variant) {
  PipelineConfig c = base;
  auto& w = c.weights;
  auto pair = [&](double& keep1, double& keep2, double& drop) {
    const double s = keep1 + keep2;
    if (!(s > 0)) throw ConfigError("variant " + variant + " leaves no positive weight");
    keep1 /= s;
    keep2 /= s;
    drop = 0.0;
  };
  if (variant == "no-D" || variant == "G+V") {
    pair(w.gradient, w.variance, w.fisher);
  } else if (variant == "V+D") {
    pair(w.variance, w.fisher, w.gradient);
  } else if (variant == "G+D") {
    pair(w.gradient, w.fisher, w.variance);
  } else if (variant == "no-metagrad") {
    c.use_meta_gradient = false;
  } else if (variant == "no-layer-adaptive") {
    c.layer_adaptive = false;
  } else if (variant == "no-metatrain") {
    c.meta_episodes = 0;
  } else if (variant == "single-stage") {
    c.mode = Mode::SingleStage;
  } else if (variant == "two-stage") {
    c.mode = Mode::TwoStage;
  } else if (variant == "signed-Gmeta") {
    c.meta.signed_accumulator = true;
  } else if (variant == "alg1-refine") {
    c.refine_form = meta::RefineForm::Product;
  } else {
    std::string list;
    for (const auto& n : variant_names()) list += (list.empty() ? "" : ", ") + n;
    throw ArgumentError("unknown ablation variant '" + variant + "' (valid: " + list + ")");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Data

namespace {

data::Dataset relabel(const data::Dataset& all, const std::vector<int>& idx, const std::vector<int>& classes) {
  std::vector<int> map(static_cast<std::size_t>(all.class_count()), -1);
  for (std::size_t k = 0; k < classes.size(); ++k) map[static_cast<std::size_t>(classes[k])] = static_cast<int>(k);
  auto d = all.subset(idx);
  for (auto& l : d.labels) l = map[static_cast<std::size_t>(l)];
  d.class_names.clear();
  for (int c : classes) d.class_names.push_back(all.class_names[static_cast<std::size_t>(c)]);
  return d;
}

}  // namespace

PreparedData prepare_data(const DataConfig& cfg) {
  PreparedData p;
  std::vector<taxonomy::ClassEntry> entries;
  std::vector<int> train_idx, test_idx;
  if (cfg.path.empty()) {
    p.all = datagen::generate_dataset(cfg.gen, cfg.samples_per_class);
    p.novel_classes = datagen::classes_with_fine(cfg.gen, cfg.novel_fine);
    entries = datagen::make_taxonomy(cfg.gen).classes();
    const auto groups = p.all.by_class();
    for (std::size_t c = 0; c < groups.size(); ++c) {
      auto idx = groups[c];
      auto rng = rnd::engine(cfg.gen.seed, 0x7e57ULL + c);
      rnd::shuffle(idx, rng);
      const auto n_test = static_cast<std::size_t>(std::llround(cfg.test_fraction * double(idx.size())));
      for (std::size_t i = 0; i < idx.size(); ++i) (i < n_test ? test_idx : train_idx).push_back(idx[i]);
    }
  } else {
    auto ing = datagen::ingest_directory(cfg.path, cfg.image_size, cfg.gen.seed);
    p.all = std::move(ing.data);
    for (const auto& name : cfg.novel_classes) {
      auto it = std::find(p.all.class_names.begin(), p.all.class_names.end(), name);
      if (it == p.all.class_names.end()) throw ConfigError("novel class '" + name + "' not found under " + cfg.path);
      p.novel_classes.push_back(static_cast<int>(it - p.all.class_names.begin()));
    }
    std::sort(p.novel_classes.begin(), p.novel_classes.end());
    train_idx = ing.train;
    train_idx.insert(train_idx.end(), ing.val.begin(), ing.val.end());
    test_idx = ing.test;
    const auto tax_path = fs::path(cfg.path) / "taxonomy.json";
    if (fs::exists(tax_path)) {
      const auto t = taxonomy::load_taxonomy(tax_path.string());
      for (const auto& name : p.all.class_names) entries.push_back(t.at(t.id_of(name)));
    } else {
      for (const auto& name : p.all.class_names) entries.push_back({name, name, name, name});
    }
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  for (int c = 0; c < p.all.class_count(); ++c)
    if (std::find(p.novel_classes.begin(), p.novel_classes.end(), c) == p.novel_classes.end())
      p.base_classes.push_back(c);
  if (p.base_classes.size() < 2) throw ConfigError("at least two base classes are required");

  auto only_base = [&](const std::vector<int>& idx) {
    std::vector<int> out;
    for (int i : idx)
      if (std::binary_search(p.novel_classes.begin(), p.novel_classes.end(), p.all.labels[static_cast<std::size_t>(i)]) ==
          false)
        out.push_back(i);
    return out;
  };
  p.base_train = relabel(p.all, only_base(train_idx), p.base_classes);
  p.base_test = relabel(p.all, only_base(test_idx), p.base_classes);
  std::vector<taxonomy::ClassEntry> base_entries;
  for (int c : p.base_classes) base_entries.push_back(entries[static_cast<std::size_t>(c)]);
  p.base_taxonomy = taxonomy::Taxonomy(base_entries);
  p.hashes = {{"all", data::content_hash(p.all)},
              {"base_train", data::content_hash(p.base_train)},
              {"base_test", data::content_hash(p.base_test)}};
  return p;
}

net::Network pretrain(const PipelineConfig& cfg, const PreparedData& data, std::uint64_t seed) {
  auto arch = net::toy_backbone(cfg.widths, static_cast<int>(data.base_classes.size()), 3, data.all.height,
                                cfg.head_dropout);
  auto net = net::make_network(arch, rnd::derive_seed(seed, 1));
  auto ts = cfg.pretrain;
  ts.seed = rnd::derive_seed(seed, 2);
  meta::train_supervised(net, data.base_train, ts);
  return net;
}

net::Batch scoring_batch(const PipelineConfig& cfg, const PreparedData& data) {
  std::vector<int> idx;
  for (const auto& members : data.base_train.by_class())
    for (std::size_t k = 0; k < members.size() && k < static_cast<std::size_t>(cfg.scoring_per_class); ++k)
      idx.push_back(members[k]);
  return data.base_train.gather(idx);
}

StageScores score_stage(const PipelineConfig& cfg, const PreparedData& data, const net::Network& net,
                        std::uint64_t seed) {
  StageScores s;
  const auto sample = scoring_batch(cfg, data);
  const auto mask = net::ChannelMask::all_true(net.architecture());
  dacis::ScoringOptions so;
  so.weights = cfg.weights;
  so.seed = seed;
  so.hessian_samples = cfg.hessian_samples;
  s.table = dacis::score_network(net, mask, sample, so);

  auto [logits, acts] = net::forward_with_stats(net, mask, sample);
  {
    net::ForwardOptions fo;
    fo.stop_at_embedding = true;
    const auto emb = net::forward(net, sample, fo).embedding;
    const int k = static_cast<int>(data.base_classes.size());
    Eigen::MatrixXd protos = Eigen::MatrixXd::Zero(k, emb.cols());
    Eigen::VectorXd counts = Eigen::VectorXd::Zero(k);
    for (int i = 0; i < sample.count(); ++i) {
      protos.row(sample.labels[static_cast<std::size_t>(i)]) += emb.row(i);
      counts(sample.labels[static_cast<std::size_t>(i)]) += 1;
    }
    for (int c = 0; c < k; ++c)
      if (counts(c) > 0) protos.row(c) /= counts(c);
    try {
      s.task_complexity = dacis::task_complexity(protos);
    } catch (const ArgumentError& e) {
      spdlog::warn("task complexity unavailable ({}); using 0", e.what());
      s.task_complexity = 0.0;
    }
  }
  const auto conv = net.architecture().prunable_layers();
  for (std::size_t i = 0; i < conv.size(); ++i) {
    const auto& name = net.layers[conv[i]].spec.name;
    s.thresholds[name] = cfg.layer_adaptive ? dacis::layer_threshold(cfg.thresholds, static_cast<int>(i),
                                                                     static_cast<int>(conv.size()), s.task_complexity)
                                            : cfg.thresholds.tau_base;
  }
  s.protection = cfg.protection ? taxonomy::protection_factor(data.base_taxonomy, taxonomy::attribute(acts, data.base_taxonomy))
                                : taxonomy::no_protection(s.table);
  return s;
}

stats::EpisodicResult evaluate_novel(const PipelineConfig& cfg, const PreparedData& data, const net::Network& net,
                                     int shots) {
  auto f = [&](const meta::Episode& e) {
    return 100.0 * meta::episode_accuracy(net, data.all, e, cfg.eval.adapt_steps, cfg.meta.alpha);
  };
  return stats::episodic_eval(f, data.all, cfg.eval.ways, shots, cfg.eval.queries, cfg.eval.episodes,
                              rnd::derive_seed(cfg.eval.episode_seed, static_cast<std::uint64_t>(shots)),
                              data.novel_classes);
}

// ---------------------------------------------------------------------------
// Pipeline run

namespace {

class RunLog {
 public:
  explicit RunLog(const std::string& dir) {
    if (!dir.empty()) out_.open(fs::path(dir) / "train_log.jsonl");
  }
  void write(const json& j) {
    if (out_) out_ << j.dump() << "\n";
  }

 private:
  std::ofstream out_;
};

void write_text(const std::string& dir, const std::string& name, const std::string& text) {
  if (dir.empty()) return;
  std::ofstream out(fs::path(dir) / name);
  out << text;
  if (!out) throw std::runtime_error("failed to write " + (fs::path(dir) / name).string());
}

void write_json(const std::string& dir, const std::string& name, const json& j) {
  write_text(dir, name, j.dump(2) + "\n");
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

json cost_json(const net::CostReport& c) {
  return {{"parameters", c.parameters}, {"macs", c.macs}, {"energy_mj", c.energy_mj}};
}

json stage_json(const std::string& name, const net::Network& n, const net::ChannelMask& cumulative,
                const net::Architecture& original, int input_size) {
  return {{"stage", name},
          {"cost", cost_json(net::count_cost(n, input_size))},
          {"sparsity", 1.0 - double(n.parameter_count()) / double(original.parameter_count())},
          {"retention", pruner::retention_table(original, cumulative)}};
}

void finetune(net::Network& n, const PipelineConfig& cfg, const PreparedData& data, int epochs, std::uint64_t seed,
              const std::string& stage, RunLog& log) {
  if (epochs <= 0) return;
  auto ts = cfg.pretrain;
  ts.epochs = epochs;
  ts.learning_rate = cfg.finetune_rate;
  ts.seed = seed;
  for (const auto& e : meta::train_supervised(n, data.base_train, ts))
    log.write({{"event", "finetune_epoch"}, {"stage", stage}, {"epoch", e.epoch}, {"loss", e.loss}, {"accuracy", e.accuracy}});
}

double measure_fps(const net::Network& n, const data::Dataset& d) {
  std::vector<int> idx;
  for (int i = 0; i < std::min(64, d.count()); ++i) idx.push_back(i);
  const auto b = d.gather(idx);
  double best = 1e300;
  for (int r = 0; r < 3; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    net::forward(n, b);
    best = std::min(best, seconds_since(t0));
  }
  return double(idx.size()) / std::max(best, 1e-9);
}

Eigen::MatrixXd embed_limited(const net::Network& n, const data::Dataset& d, const std::vector<int>& pool, int limit) {
  std::vector<int> idx;
  for (int i = 0; i < d.count() && static_cast<int>(idx.size()) < limit; ++i)
    if (pool.empty() || std::find(pool.begin(), pool.end(), d.labels[static_cast<std::size_t>(i)]) != pool.end())
      idx.push_back(i);
  return meta::embed(n, d, idx);
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

}  // namespace

RunResult run_pmp(const PipelineConfig& cfg, std::uint64_t seed, const RunOptions& opts) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();
  const std::string dir = opts.output_dir;
  if (!dir.empty()) fs::create_directories(dir);
  write_json(dir, "config.json", cfg.to_json());

  std::optional<PreparedData> own_data;
  if (!opts.data) own_data = prepare_data(cfg.data);
  const PreparedData& data = opts.data ? *opts.data : *own_data;
  const int size = data.all.height;
  RunLog log(dir);
  json timing;
  std::string stage = "pretrain";

  RunResult result;
  try {
    auto t0 = std::chrono::steady_clock::now();
    net::Network net0 = opts.pretrained ? *opts.pretrained : pretrain(cfg, data, seed);
    timing["pretrain_s"] = seconds_since(t0);
    if (!dir.empty()) net::save_checkpoint(net0, (fs::path(dir) / "stage0.ckpt").string());
    const auto original = net0.architecture();
    const auto baseline_cost = net::count_cost(net0, size);
    json stages = json::array();
    stages.push_back(stage_json("pretrained", net0, net::ChannelMask::all_true(original), original, size));

    stage = "assumptions";
    const auto sample = scoring_batch(cfg, data);
    const auto assumptions =
        stats::assumption_checks(net::forward_with_stats(net0, net::ChannelMask::all_true(original), sample).second);

    pruner::StageOptions so;
    so.stage1_removal = cfg.stage1_removal;
    net::Network live = net0;
    net::ChannelMask prior = net::ChannelMask::all_true(original);
    std::optional<net::ChannelMask> stage1_mask;
    json tables;
    std::map<std::string, Eigen::VectorXd> g_meta;

    auto prune = [&](int which, const dacis::ImportanceTable& table, const StageScores& sc, bool refined) {
      so.thresholds = sc.thresholds;
      so.protection = sc.protection;
      so.use_refined = refined;
      auto r = pruner::stage_prune(live, prior, original.parameter_count(), table, which, cfg.sparsity, so);
      live = std::move(r.network);
      prior = r.stage.cumulative;
    };

    if (cfg.mode == Mode::SingleStage) {
      stage = "single-stage prune";
      t0 = std::chrono::steady_clock::now();
      const auto sc = score_stage(cfg, data, live, rnd::derive_seed(seed, 11));
      tables["single"] = dacis::table_to_json(sc.table);
      prune(3, sc.table, sc, false);
      finetune(live, cfg, data, cfg.e1 + cfg.e2, rnd::derive_seed(seed, 12), "single", log);
      stages.push_back(stage_json("single-stage", live, prior, original, size));
      timing["prune_s"] = seconds_since(t0);
    } else {
      stage = "stage 1";
      t0 = std::chrono::steady_clock::now();
      const auto sc1 = score_stage(cfg, data, live, rnd::derive_seed(seed, 21));
      tables["stage1"] = dacis::table_to_json(sc1.table);
      prune(1, sc1.table, sc1, false);
      stage1_mask = prior;
      if (!dir.empty()) net::save_mask(prior, (fs::path(dir) / "mask_stage1.json").string());
      finetune(live, cfg, data, cfg.e1, rnd::derive_seed(seed, 22), "stage1", log);
      if (!dir.empty()) net::save_checkpoint(live, (fs::path(dir) / "stage1.ckpt").string());
      stages.push_back(stage_json("stage1", live, prior, original, size));
      timing["stage1_s"] = seconds_since(t0);

      stage = "stage 2";
      t0 = std::chrono::steady_clock::now();
      if (cfg.mode == Mode::ThreeStage) {
        auto state = meta::MetaState::start(live, cfg.meta);
        const int steps = (cfg.meta_episodes + cfg.meta.meta_batch - 1) / cfg.meta.meta_batch;
        std::uint64_t drawn = 0;
        for (int s = 0; s < steps; ++s) {
          std::vector<meta::Episode> batch;
          for (int k = 0; k < cfg.meta.meta_batch && static_cast<int>(drawn) < cfg.meta_episodes; ++k, ++drawn)
            batch.push_back(meta::sample_episode(data.base_train, cfg.meta.ways, cfg.meta.shots, cfg.meta.queries,
                                                 rnd::derive_seed(seed, 0x3e7a0000ULL + drawn)));
          auto rec = meta::outer_update(state, data.base_train, batch);
          auto j = rec.to_json();
          j["event"] = "outer_step";
          log.write(j);
        }
        live = state.params;
        g_meta = state.g_meta();
        if (!dir.empty()) net::save_checkpoint(live, (fs::path(dir) / "stage2.ckpt").string());
      }
      timing["stage2_s"] = seconds_since(t0);

      stage = "stage 3";
      t0 = std::chrono::steady_clock::now();
      const auto sc3 = score_stage(cfg, data, live, rnd::derive_seed(seed, 31));
      dacis::ImportanceTable table3 = sc3.table;
      bool refined = false;
      if (cfg.mode == Mode::ThreeStage && cfg.use_meta_gradient && !g_meta.empty()) {
        table3 = meta::refine_dacis(sc3.table, g_meta, cfg.gamma, cfg.refine_form);
        refined = true;
      }
      tables["stage3"] = dacis::table_to_json(table3);
      prune(3, table3, sc3, refined);
      finetune(live, cfg, data, cfg.e2, rnd::derive_seed(seed, 32), "stage3", log);
      stages.push_back(stage_json("stage3", live, prior, original, size));
      timing["stage3_s"] = seconds_since(t0);
      if (!prior.subset_of(*stage1_mask)) throw StructuralError("stage-3 retained set escapes the stage-1 set");
    }
    if (!dir.empty()) {
      net::save_checkpoint(live, (fs::path(dir) / "final.ckpt").string());
      net::save_mask(prior, (fs::path(dir) / "mask_final.json").string());
      write_json(dir, "importance.json", tables);
    }

    stage = "evaluation";
    t0 = std::chrono::steady_clock::now();
    json acc = json::object();
    for (int shots : cfg.eval.shots) {
      auto r = evaluate_novel(cfg, data, live, shots);
      acc[std::to_string(shots) + "-shot"] = {
          {"mean", r.summary.mean},
          {"sd", r.summary.sd},
          {"ci95", {r.summary.ci_low, r.summary.ci_high}},
          {"fsi", r.summary.mean > 0 ? json(stats::fsi(r.accuracies)) : json(nullptr)},
          {"accuracies", r.accuracies}};
      result.novel[shots] = std::move(r);
    }

    std::vector<int> all_test(static_cast<std::size_t>(data.base_test.count()));
    std::iota(all_test.begin(), all_test.end(), 0);
    const auto test_batch = data.base_test.gather(all_test);
    const auto test_logits = net::forward(live, test_batch).logits;
    const double task = objective::task_loss(test_logits, test_batch.labels);
    const auto final_cost = net::count_cost(live, size);
    const double compress = objective::compression_loss(final_cost, baseline_cost, cfg.objective);
    std::optional<double> gen;
    try {
      gen = objective::generalization_penalty(embed_limited(live, data.base_train, {}, 300),
                                              embed_limited(live, data.all, data.novel_classes, 300));
    } catch (const std::exception& e) {
      spdlog::warn("generalization penalty unavailable: {}", e.what());
    }
    json calibration = nullptr;
    if (test_batch.count() >= 100 && cfg.eval.mc_passes > 0) {
      auto mc = uncertainty::mc_predict(live, test_batch, cfg.eval.mc_passes, rnd::derive_seed(seed, 41),
                                        cfg.eval.flag_threshold);
      std::vector<bool> correct;
      for (std::size_t i = 0; i < mc.predicted.size(); ++i) correct.push_back(mc.predicted[i] == test_batch.labels[i]);
      auto rep = uncertainty::calibration_report(mc.predicted_variance, correct, cfg.eval.flag_threshold);
      calibration = {{"predictions", rep.predictions},
                     {"flag_rate", rep.flag_rate},
                     {"flagged_error", opt_json(rep.flagged_error)},
                     {"unflagged_error", opt_json(rep.unflagged_error)},
                     {"spearman", opt_json(rep.spearman)},
                     {"note", rep.note}};
    }
    int right = 0;
    for (Eigen::Index i = 0; i < test_logits.rows(); ++i) {
      Eigen::Index best = 0;
      test_logits.row(i).maxCoeff(&best);
      right += best == test_batch.labels[static_cast<std::size_t>(i)];
    }
    timing["evaluation_s"] = seconds_since(t0);

    const double fps = measure_fps(live, data.base_test);
    timing["fps_measured"] = fps;
    if (acc.contains("5-shot") && acc["5-shot"]["mean"].get<double>() > 0)
      timing["des_modeled"] = stats::des(acc["5-shot"]["mean"].get<double>(), fps, final_cost.parameters / 1e6,
                                         final_cost.energy_mj);
    timing["total_s"] = seconds_since(t_start);

    result.metrics = {{"kind", "run"},
                      {"seed", seed},
                      {"mode", mode_name(cfg.mode)},
                      {"config", cfg.to_json()},
                      {"data_sha256", data.hashes},
                      {"stages", stages},
                      {"novel_accuracy", acc},
                      {"base_test_accuracy", 100.0 * right / std::max(1, test_batch.count())},
                      {"objective",
                       {{"task", task},
                        {"compression", compress},
                        {"generalization", opt_json(gen)},
                        {"total", gen ? json(objective::total_loss(task, compress, *gen, cfg.objective)) : json(nullptr)}}},
                      {"uncertainty", calibration},
                      {"assumptions", assumptions.to_json()},
                      {"final_cost", cost_json(final_cost)},
                      {"baseline_cost", cost_json(baseline_cost)}};
    result.timing = timing;
    result.network = std::move(live);
    result.mask = std::move(prior);

    const std::string metrics_text = result.metrics.dump(2) + "\n";
    result.timing["metrics_sha256"] = data::sha256_hex(metrics_text);
    write_text(dir, "metrics.json", metrics_text);
    write_json(dir, "timing.json", result.timing);
    json both = result.metrics;
    both["timing"] = result.timing;
    write_text(dir, "report.md", render_markdown(both));
  } catch (const std::exception& e) {
    if (!dir.empty()) write_json(dir, "failure.json", {{"stage", stage}, {"error", e.what()}});
    spdlog::error("run failed during {}: {}", stage, e.what());
    throw;
  }
  return result;
}

// ---------------------------------------------------------------------------
// SAMS and ablations

double sams_sparsity(int shots) {
  switch (shots) {
    case 1: return 0.30;
    case 5: return 0.55;
    case 10: return 0.78;
    default: throw ArgumentError("SAMS regimes are 1, 5 and 10 shots");
  }
}

json run_sams(const PipelineConfig& cfg, const std::vector<int>& regimes, const std::string& output_dir) {
  if (regimes.empty()) throw ArgumentError("SAMS needs at least one regime");
  const auto seed = cfg.seeds.front();
  const auto data = prepare_data(cfg.data);
  const auto net0 = pretrain(cfg, data, seed);
  json rows = json::array();
  for (int shots : regimes) {
    json row = {{"shots", shots}};
    try {
      auto c = cfg;
      c.sparsity = sams_sparsity(shots);
      c.eval.shots = {shots};
      row["sparsity"] = c.sparsity;
      row["target_retention"] = 1.0 - c.sparsity;
      RunOptions ro;
      ro.data = &data;
      ro.pretrained = &net0;
      if (!output_dir.empty()) ro.output_dir = (fs::path(output_dir) / ("sams_" + std::to_string(shots) + "shot")).string();
      auto r = run_pmp(c, seed, ro);
      const auto& s = r.novel.at(shots).summary;
      row["parameters"] = r.network.parameter_count();
      row["macs"] = r.metrics["final_cost"]["macs"];
      row["energy_mj"] = r.metrics["final_cost"]["energy_mj"];
      row["accuracy"] = s.mean;
      row["ci95"] = {s.ci_low, s.ci_high};
      row["status"] = "ok";
    } catch (const std::exception& e) {
      row["status"] = "failed";
      row["error"] = e.what();
    }
    rows.push_back(row);
  }
  json out = {{"kind", "sams"}, {"seed", seed}, {"rows", rows}};
  if (!output_dir.empty()) {
    fs::create_directories(output_dir);
    write_json(output_dir, "sams.json", out);
    write_text(output_dir, "sams.md", render_markdown(out));
  }
  return out;
}

json run_ablation(const PipelineConfig& cfg, const std::vector<std::string>& variants, const std::string& output_dir) {
  std::vector<PipelineConfig> configs;
  for (const auto& v : variants) configs.push_back(apply_variant(cfg, v));
  const auto data = prepare_data(cfg.data);
  std::map<int, std::vector<double>> base_acc;
  std::vector<std::map<int, std::vector<double>>> var_acc(variants.size());
  for (auto seed : cfg.seeds) {
    const auto net0 = pretrain(cfg, data, seed);
    auto run = [&](const PipelineConfig& c, const std::string& name) {
      RunOptions ro;
      ro.data = &data;
      ro.pretrained = &net0;
      if (!output_dir.empty()) ro.output_dir = (fs::path(output_dir) / name / ("seed_" + std::to_string(seed))).string();
      return run_pmp(c, seed, ro);
    };
    auto b = run(cfg, "baseline");
    for (const auto& [shots, r] : b.novel)
      base_acc[shots].insert(base_acc[shots].end(), r.accuracies.begin(), r.accuracies.end());
    for (std::size_t v = 0; v < variants.size(); ++v) {
      auto r = run(configs[v], variants[v]);
      for (const auto& [shots, e] : r.novel)
        var_acc[v][shots].insert(var_acc[v][shots].end(), e.accuracies.begin(), e.accuracies.end());
    }
  }
  const int m = static_cast<int>(variants.size() * cfg.eval.shots.size());
  json rows = json::array();
  std::vector<stats::PairedReport> family;
  std::vector<std::pair<std::size_t, int>> where;
  for (std::size_t v = 0; v < variants.size(); ++v)
    for (int shots : cfg.eval.shots) {
      family.push_back(stats::paired_tests(base_acc[shots], var_acc[v][shots], m, "baseline", variants[v]));
      where.emplace_back(v, shots);
    }
  stats::adjust_family(family, m);
  for (std::size_t k = 0; k < family.size(); ++k) {
    const auto [v, shots] = where[k];
    rows.push_back({{"variant", variants[v]},
                    {"shots", shots},
                    {"baseline_mean", stats::summarize(base_acc[shots]).mean},
                    {"variant_mean", stats::summarize(var_acc[v][shots]).mean},
                    {"delta", -family[k].mean_difference},
                    {"tests", family[k].to_json()}});
  }
  json out = {{"kind", "ablation"}, {"seeds", cfg.seeds}, {"comparisons", m}, {"rows", rows}};
  if (!output_dir.empty()) {
    fs::create_directories(output_dir);
    write_json(output_dir, "ablation.json", out);
    write_text(output_dir, "ablation.md", render_markdown(out));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Markdown

namespace {

std::string fmt(const json& v, int precision = 2) {
  if (v.is_null()) return "n/a";
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number()) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(precision) << v.get<double>();
    return os.str();
  }
  if (v.is_string()) return v.get<std::string>();
  return v.dump();
}

}  // namespace

std::string render_markdown(const json& r) {
  std::ostringstream md;
  const std::string kind = r.value("kind", "run");
  if (kind == "run") {
    md << "# Pipeline run (seed " << fmt(r["seed"]) << ", " << fmt(r["mode"]) << ")\n\n";
    md << "## Stages\n\n| stage | parameters | MACs | energy (mJ, modelled) | sparsity |\n|---|---|---|---|---|\n";
    for (const auto& s : r["stages"])
      md << "| " << fmt(s["stage"]) << " | " << fmt(s["cost"]["parameters"]) << " | " << fmt(s["cost"]["macs"]) << " | "
         << fmt(s["cost"]["energy_mj"], 6) << " | " << fmt(s["sparsity"], 3) << " |\n";
    md << "\n## Novel-class episodic accuracy\n\n| setting | mean % | sd | 95% CI | FSI |\n|---|---|---|---|---|\n";
    for (const auto& [k, v] : r["novel_accuracy"].items())
      md << "| " << k << " | " << fmt(v["mean"]) << " | " << fmt(v["sd"]) << " | [" << fmt(v["ci95"][0]) << ", "
         << fmt(v["ci95"][1]) << "] | " << fmt(v["fsi"], 3) << " |\n";
    md << "\nBase-class test accuracy: " << fmt(r["base_test_accuracy"]) << "%\n\n";
    md << "## Objective\n\n| task | compression | generalization | total |\n|---|---|---|---|\n| "
       << fmt(r["objective"]["task"], 4) << " | " << fmt(r["objective"]["compression"], 4) << " | "
       << fmt(r["objective"]["generalization"], 4) << " | " << fmt(r["objective"]["total"], 4) << " |\n\n";
    if (!r["uncertainty"].is_null()) {
      const auto& u = r["uncertainty"];
      md << "## MC-dropout uncertainty\n\nflag rate " << fmt(u["flag_rate"], 3) << ", flagged error "
         << fmt(u["flagged_error"], 3) << ", unflagged error " << fmt(u["unflagged_error"], 3) << ", Spearman "
         << fmt(u["spearman"], 3);
      if (!u["note"].get<std::string>().empty()) md << " (" << fmt(u["note"]) << ")";
      md << "\n\n";
    }
    const auto& a = r["assumptions"];
    md << "## Activation assumptions (pretrained backbone)\n\nnormality pass " << fmt(a["normal_fraction"], 3)
       << ", equal-variance pass " << fmt(a["equal_variance_fraction"], 3) << ", channels tested "
       << fmt(a["channels_tested"]) << ", excluded " << fmt(a["channels_excluded"]) << "\n";
    if (r.contains("timing")) {
      const auto& t = r["timing"];
      md << "\n## Timing (host dependent)\n\nmeasured FPS " << fmt(t.value("fps_measured", json(nullptr)), 1)
         << ", DES (modelled energy) " << fmt(t.value("des_modeled", json(nullptr)), 1) << ", total "
         << fmt(t.value("total_s", json(nullptr)), 1) << " s\n\nmetrics.json SHA-256: "
         << fmt(t.value("metrics_sha256", json(nullptr))) << "\n";
    }
  } else if (kind == "sams") {
    md << "# Shot-regime capacity matrix (seed " << fmt(r["seed"]) << ")\n\n";
    md << "| shots | sparsity | target retention | parameters | accuracy % | 95% CI | status |\n|---|---|---|---|---|---|---|\n";
    for (const auto& row : r["rows"]) {
      const bool ok = row.value("status", "") == "ok";
      md << "| " << fmt(row["shots"]) << " | " << fmt(row.value("sparsity", json(nullptr))) << " | "
         << fmt(row.value("target_retention", json(nullptr))) << " | "
         << (ok ? fmt(row["parameters"]) : "-") << " | " << (ok ? fmt(row["accuracy"]) : "-") << " | "
         << (ok ? "[" + fmt(row["ci95"][0]) + ", " + fmt(row["ci95"][1]) + "]" : "-") << " | "
         << (ok ? "ok" : "failed: " + fmt(row["error"])) << " |\n";
    }
  } else if (kind == "ablation") {
    md << "# Ablation (" << fmt(r["comparisons"]) << " comparisons)\n\n";
    md << "| variant | shots | baseline % | variant % | delta | t p | Wilcoxon p | Bonferroni | Holm | Cohen's d |\n"
          "|---|---|---|---|---|---|---|---|---|---|\n";
    for (const auto& row : r["rows"]) {
      const auto& t = row["tests"];
      md << "| " << fmt(row["variant"]) << " | " << fmt(row["shots"]) << " | " << fmt(row["baseline_mean"]) << " | "
         << fmt(row["variant_mean"]) << " | " << fmt(row["delta"]) << " | " << fmt(t["t_p"], 4) << " | "
         << fmt(t["wilcoxon_p"], 4) << " | " << fmt(t["bonferroni_p"], 4) << " | " << fmt(t["holm_p"], 4) << " | "
         << fmt(t["cohens_d"], 3) << " |\n";
    }
  } else {
    md << "```json\n" << r.dump(2) << "\n```\n";
  }
  return md.str();
}

}  // namespace pmp::pipeline
