#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "pmp/errors.hpp"
#include "pmp/pipeline.hpp"
#include "pmp/pruner.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pmp;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string output_dir;
  std::vector<std::uint64_t> seeds;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config_path, "JSON configuration file");
  cmd->add_option("--set", c.overrides, "Override a configuration value: dotted.key=json_value")->take_all();
  cmd->add_option("-o,--output", c.output_dir, "Output directory");
  cmd->add_option("--seed", c.seeds, "Seeds (replaces the configured list)")->take_all();
}

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return text;
  }
}

pipeline::PipelineConfig load_config(const Common& c) {
  json j = c.config_path.empty() ? pipeline::PipelineConfig().to_json() : [&] {
    std::ifstream in(c.config_path);
    if (!in) throw ConfigError("cannot open configuration file '" + c.config_path + "'");
    try {
      return json::parse(in);
    } catch (const json::exception& e) {
      throw ConfigError("configuration file '" + c.config_path + "' is not valid JSON: " + e.what());
    }
  }();
  for (const auto& o : c.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + o + "' must look like key=value");
    std::string pointer = "/" + o.substr(0, eq);
    std::replace(pointer.begin(), pointer.end(), '.', '/');
    j[json::json_pointer(pointer)] = parse_value(o.substr(eq + 1));
  }
  auto cfg = pipeline::PipelineConfig::from_json(j);
  if (const char* root = std::getenv("PMP_OUTPUT_ROOT"); root && *root && c.output_dir.empty())
    cfg.output_dir = (fs::path(root) / cfg.output_dir).string();
  if (!c.output_dir.empty()) cfg.output_dir = c.output_dir;
  if (!c.seeds.empty()) cfg.seeds = c.seeds;
  cfg.validate();
  return cfg;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << text;
  if (!out) throw std::runtime_error("failed to write " + path.string());
}

std::vector<int> parse_ints(const std::string& list) {
  std::vector<int> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(std::stoi(item));
  return out;
}

int cmd_generate(const Common& c, int per_class) {
  auto cfg = load_config(c);
  if (per_class > 0) cfg.data.samples_per_class = per_class;
  const auto d = datagen::generate_dataset(cfg.data.gen, cfg.data.samples_per_class);
  const fs::path root = cfg.output_dir;
  datagen::write_directory(d, root.string());
  taxonomy::save_taxonomy(datagen::make_taxonomy(cfg.data.gen), (root / "taxonomy.json").string());
  std::cout << "wrote " << d.count() << " images in " << d.class_count() << " classes to " << root.string() << "\n"
            << "content sha256 " << data::content_hash(d) << "\n";
  return 0;
}

int cmd_train(const Common& c) {
  const auto cfg = load_config(c);
  const auto data = pipeline::prepare_data(cfg.data);
  json sweep = json::array();
  std::map<int, std::vector<double>> by_shot;
  for (auto seed : cfg.seeds) {
    pipeline::RunOptions ro;
    ro.data = &data;
    ro.output_dir = (fs::path(cfg.output_dir) / ("seed_" + std::to_string(seed))).string();
    const auto r = pipeline::run_pmp(cfg, seed, ro);
    json row = {{"seed", seed}, {"parameters", r.network.parameter_count()}, {"output", ro.output_dir}};
    for (const auto& [shots, e] : r.novel) {
      row[std::to_string(shots) + "-shot"] = e.summary.mean;
      by_shot[shots].push_back(e.summary.mean);
    }
    std::cout << row.dump() << "\n";
    sweep.push_back(row);
  }
  if (cfg.seeds.size() > 1) {
    json summary = json::object();
    for (const auto& [shots, v] : by_shot) {
      const auto s = stats::summarize(v);
      summary[std::to_string(shots) + "-shot"] = {
          {"mean", s.mean}, {"sd", s.sd}, {"spread", *std::max_element(v.begin(), v.end()) - *std::min_element(v.begin(), v.end())}};
    }
    write_file(fs::path(cfg.output_dir) / "seed_sweep.json", json({{"runs", sweep}, {"summary", summary}}).dump(2) + "\n");
    std::cout << summary.dump() << "\n";
  }
  return 0;
}

int cmd_prune(const Common& c, const std::string& checkpoint, double sparsity, int stage, bool dry_run,
              const std::string& mask_out) {
  auto cfg = load_config(c);
  if (sparsity > 0) cfg.sparsity = sparsity;
  cfg.validate();
  const auto data = pipeline::prepare_data(cfg.data);
  const auto net = net::load_checkpoint(checkpoint);
  const auto arch = net.architecture();
  const auto sc = pipeline::score_stage(cfg, data, net, cfg.seeds.front());
  pruner::StageOptions so;
  so.thresholds = sc.thresholds;
  so.protection = sc.protection;
  so.use_refined = false;
  so.stage1_removal = cfg.stage1_removal;
  const auto prior = net::ChannelMask::all_true(arch);
  const auto r = pruner::stage_prune(arch, prior, arch.parameter_count(), pruner::table_scores(arch, sc.table, false),
                                     stage, cfg.sparsity, so);
  json out = {{"parameters_before", arch.parameter_count()},
              {"parameters_after", r.parameters},
              {"sparsity", r.sparsity},
              {"retention", pruner::retention_table(arch, r.cumulative)}};
  std::cout << out.dump(2) << "\n";
  if (!dry_run) {
    const fs::path dir = cfg.output_dir;
    const auto mask_path = mask_out.empty() ? dir / "mask.json" : fs::path(mask_out);
    if (mask_path.has_parent_path()) fs::create_directories(mask_path.parent_path());
    net::save_mask(r.cumulative, mask_path.string());
    fs::create_directories(dir);
    net::save_checkpoint(net::repack_network(net, r.live_mask), (dir / "pruned.ckpt").string());
    write_file(dir / "importance.json", dacis::table_to_json(sc.table).dump(2) + "\n");
  }
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& shots_list) {
  auto cfg = load_config(c);
  if (!shots_list.empty()) cfg.eval.shots = parse_ints(shots_list);
  const auto data = pipeline::prepare_data(cfg.data);
  const auto net = net::load_checkpoint(checkpoint);
  json out = {{"checkpoint", checkpoint}, {"parameters", net.parameter_count()}};
  for (int shots : cfg.eval.shots) {
    const auto r = pipeline::evaluate_novel(cfg, data, net, shots);
    out[std::to_string(shots) + "-shot"] = r.to_json();
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_ablate(const Common& c, const std::vector<std::string>& variants) {
  const auto cfg = load_config(c);
  const auto& names = variants.empty() ? pipeline::variant_names() : variants;
  const auto out = pipeline::run_ablation(cfg, names, cfg.output_dir);
  std::cout << pipeline::render_markdown(out);
  return 0;
}

int cmd_sams(const Common& c, const std::string& regimes) {
  const auto cfg = load_config(c);
  const auto out = pipeline::run_sams(cfg, parse_ints(regimes), cfg.output_dir);
  std::cout << pipeline::render_markdown(out);
  return 0;
}

int cmd_report(const std::string& input, const std::string& output) {
  std::ifstream in(input);
  if (!in) throw ConfigError("cannot open result file '" + input + "'");
  json j = json::parse(in);
  const auto timing = fs::path(input).parent_path() / "timing.json";
  if (j.value("kind", "") == "run" && fs::exists(timing)) {
    std::ifstream t(timing);
    j["timing"] = json::parse(t);
  }
  const auto md = pipeline::render_markdown(j);
  if (output.empty())
    std::cout << md;
  else
    write_file(output, md);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* threads = std::getenv("PMP_THREADS"); threads && *threads) Eigen::setNbThreads(std::atoi(threads));

  CLI::App app{"Progressive meta-pruning of few-shot disease classifiers"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "Debug logging");

  Common common;
  int per_class = 0;
  auto* generate = app.add_subcommand("generate", "Write the synthetic dataset as class-named image directories");
  add_common(generate, common);
  generate->add_option("--per-class", per_class, "Images per class");

  auto* train = app.add_subcommand("train", "Run the full three-stage pipeline for each seed");
  add_common(train, common);

  std::string checkpoint, mask_out;
  double sparsity = 0.0;
  int stage = 3;
  bool dry_run = false;
  auto* prune = app.add_subcommand("prune", "Score a checkpoint and prune it once");
  add_common(prune, common);
  prune->add_option("--checkpoint", checkpoint, "Network checkpoint")->required();
  prune->add_option("--sparsity", sparsity, "Total parameter sparsity");
  prune->add_option("--stage", stage, "1 (fixed removal) or 3 (total sparsity)")->check(CLI::IsMember({1, 3}));
  prune->add_flag("--dry-run", dry_run, "Print the retention table only");
  prune->add_option("--mask-out", mask_out, "Mask JSON path");

  std::string shots;
  auto* eval = app.add_subcommand("eval", "Episodic novel-class accuracy of a checkpoint");
  add_common(eval, common);
  eval->add_option("--checkpoint", checkpoint, "Network checkpoint")->required();
  eval->add_option("--shots", shots, "Comma-separated shot counts");

  std::vector<std::string> variants;
  auto* ablate = app.add_subcommand("ablate", "Paired comparison of ablation variants against the full pipeline");
  add_common(ablate, common);
  ablate->add_option("--variant", variants, "Variant names (default: all)")->take_all();

  std::string regimes = "1,5,10";
  auto* sams = app.add_subcommand("sams", "One pruned model per shot regime");
  add_common(sams, common);
  sams->add_option("--regimes", regimes, "Comma-separated shot regimes");

  std::string input, output;
  auto* report = app.add_subcommand("report", "Render a result JSON as markdown");
  report->add_option("input", input, "metrics.json, sams.json or ablation.json")->required();
  report->add_option("-o,--output", output, "Markdown path (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    if (generate->parsed()) return cmd_generate(common, per_class);
    if (train->parsed()) return cmd_train(common);
    if (prune->parsed()) return cmd_prune(common, checkpoint, sparsity, stage, dry_run, mask_out);
    if (eval->parsed()) return cmd_eval(common, checkpoint, shots);
    if (ablate->parsed()) return cmd_ablate(common, variants);
    if (sams->parsed()) return cmd_sams(common, regimes);
    if (report->parsed()) return cmd_report(input, output);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const ArgumentError& e) {
    std::cerr << "invalid argument: " << e.what() << "\n";
    return 2;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
