#include <random>

#include "doctest.h"
#include "pmp/errors.hpp"
#include "pmp/pruner.hpp"

using namespace pmp;

namespace {

net::Architecture one_conv(int channels) {
  net::Architecture a;
  a.input_channels = 3;
  a.input_size = 8;
  a.layers.push_back({"conv1", net::LayerKind::Conv, 3, channels, 3, 1, false, 0.0, -1});
  a.layers.push_back({"fc", net::LayerKind::FullyConnected, channels, 2, 1, 1, false, 0.0, -1});
  return a;
}

pruner::ChannelScores random_layer_scores(const net::Architecture& a, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  pruner::ChannelScores s;
  for (const auto& l : a.layers)
    if (l.is_conv())
      for (int c = 0; c < l.out_channels; ++c) s[l.name].push_back(u(rng));
  return s;
}

std::vector<bool> bits(std::initializer_list<int> v) {
  std::vector<bool> out;
  for (int b : v) out.push_back(b != 0);
  return out;
}

}  // namespace

TEST_CASE("full retention with zero thresholds keeps everything") {
  auto a = net::toy_backbone({8, 16, 32}, 5);
  std::mt19937_64 rng(1);
  auto s = random_layer_scores(a, rng);
  for (auto& [k, v] : s)
    for (auto& x : v) x += 0.01;
  auto m = pruner::select_prune_set(a, s, {}, 1.0, {});
  CHECK(m == net::ChannelMask::all_true(a));
}

TEST_CASE("threshold pass keeps exactly the channels above tau") {
  auto a = one_conv(10);
  pruner::ChannelScores s;
  for (int c = 0; c < 10; ++c) s["conv1"].push_back(0.1 * (c + 1));
  auto m = pruner::select_prune_set(a, s, {{"conv1", 0.35}}, 1.0, {});
  CHECK(m.at("conv1") == bits({0, 0, 0, 1, 1, 1, 1, 1, 1, 1}));
}

TEST_CASE("uniform scores under a strict budget drop lowest channel indices first") {
  auto a = one_conv(10);
  pruner::ChannelScores s;
  s["conv1"].assign(10, 0.5);
  auto m = pruner::select_prune_set(a, s, {}, 0.5, {});
  CHECK(m.at("conv1") == bits({0, 0, 0, 0, 0, 1, 1, 1, 1, 1}));
}

TEST_CASE("a threshold that would empty a layer keeps its best channel") {
  auto a = one_conv(4);
  pruner::ChannelScores s{{"conv1", {0.1, 0.3, 0.3, 0.2}}};
  auto m = pruner::select_prune_set(a, s, {{"conv1", 0.9}}, 1.0, {});
  CHECK(m.at("conv1") == bits({0, 1, 0, 0}));
}

TEST_CASE("protection multiplies scores before thresholding") {
  auto a = one_conv(3);
  pruner::ChannelScores s{{"conv1", {0.3, 0.3, 0.3}}};
  auto m = pruner::select_prune_set(a, s, {{"conv1", 0.4}}, 1.0, {{"conv1", {1.0, 2.0, 1.5}}});
  CHECK(m.at("conv1") == bits({0, 1, 1}));
}

TEST_CASE("infeasible targets are refused with the minimal retention") {
  auto a = net::toy_backbone({8, 16}, 5);
  std::mt19937_64 rng(2);
  auto s = random_layer_scores(a, rng);
  const double floor = pruner::minimal_retention(a);
  try {
    pruner::select_prune_set(a, s, {}, floor * 0.5, {});
    FAIL("expected refusal");
  } catch (const InfeasibleTarget& e) {
    CHECK(e.minimal_retention() == doctest::Approx(floor));
  }
  CHECK_NOTHROW(pruner::select_prune_set(a, s, {}, floor + 1e-6, {}));
  CHECK_THROWS_AS(pruner::select_prune_set(a, s, {}, 0.0, {}), ArgumentError);
}

TEST_CASE("retained parameter count agrees with a repacked architecture") {
  auto a = net::resnet18_reference();
  std::mt19937_64 rng(3);
  auto s = random_layer_scores(a, rng);
  auto m = pruner::select_prune_set(a, s, {}, 0.5, {});
  CHECK(pruner::retained_parameters(a, m) == net::repack_architecture(a, m).parameter_count());
}

TEST_CASE("stage pruning of the reference shape reaches 6.7M then 2.5M parameters") {
  auto a = net::resnet18_reference();
  const auto original = a.parameter_count();
  std::mt19937_64 rng(4);
  auto s1 = random_layer_scores(a, rng);
  pruner::StageOptions opts;
  auto st1 = pruner::stage_prune(a, net::ChannelMask::all_true(a), original, s1, 1, 0.78, opts);
  CHECK(std::abs(st1.parameters / 6.7e6 - 1.0) <= 0.02);

  auto s3 = random_layer_scores(st1.architecture, rng);
  auto st3 = pruner::stage_prune(st1.architecture, st1.cumulative, original, s3, 3, 0.78, opts);
  CHECK(std::abs(st3.parameters / 2.5e6 - 1.0) <= 0.02);
  CHECK(st3.cumulative.subset_of(st1.cumulative));
  CHECK(net::repack_architecture(a, st3.cumulative).parameter_count() == st3.parameters);

  // Barely beyond stage 1: essentially nothing more is removed.
  auto near = pruner::stage_prune(st1.architecture, st1.cumulative, original, s3, 3, 0.4001, opts);
  CHECK(near.cumulative.subset_of(st1.cumulative));
  CHECK(static_cast<double>(st1.parameters - near.parameters) / original < 0.002);
}

TEST_CASE("property: stage masks nest and hit their targets on toy shapes") {
  std::mt19937_64 rng(5);
  const std::vector<std::vector<int>> shapes = {{8, 16, 32}, {16, 32, 32, 64}, {32, 32, 64, 64}, {8, 16, 32, 64}};
  for (const auto& w : shapes)
    for (double s : {0.5, 0.6, 0.78, 0.9}) {
      auto a = net::toy_backbone(w, 5);
      const auto original = a.parameter_count();
      pruner::StageOptions opts;
      std::uniform_real_distribution<double> u(0.0, 0.3);
      for (const auto& l : a.layers)
        if (l.is_conv()) opts.thresholds[l.name] = u(rng);
      auto st1 = pruner::stage_prune(a, net::ChannelMask::all_true(a), original, random_layer_scores(a, rng), 1,
                                     s, opts);
      CHECK(std::abs(st1.sparsity - 0.4) <= 0.02);
      opts.thresholds.clear();
      auto st3 = pruner::stage_prune(st1.architecture, st1.cumulative, original,
                                     random_layer_scores(st1.architecture, rng), 3, s, opts);
      CHECK(std::abs(st3.sparsity - s) <= 0.02);
      CHECK(st3.cumulative.subset_of(st1.cumulative));
    }
}

TEST_CASE("stage 1 stops at the total sparsity when it is below the fixed removal") {
  auto a = net::toy_backbone({16, 32, 32, 64}, 5);
  std::mt19937_64 rng(6);
  auto st = pruner::stage_prune(a, net::ChannelMask::all_true(a), a.parameter_count(), random_layer_scores(a, rng),
                                1, 0.30, {});
  CHECK(std::abs(st.sparsity - 0.30) <= 0.02);
}

TEST_CASE("selection is deterministic down to the exported bytes") {
  auto a = net::toy_backbone({16, 32, 32, 64}, 5);
  std::mt19937_64 r1(7), r2(7);
  auto m1 = pruner::select_prune_set(a, random_layer_scores(a, r1), {}, 0.5, {});
  auto m2 = pruner::select_prune_set(a, random_layer_scores(a, r2), {}, 0.5, {});
  CHECK(net::mask_to_json(m1).dump() == net::mask_to_json(m2).dump());
}

TEST_CASE("importance tables map onto channels, refined values preferred on request") {
  auto a = one_conv(3);
  dacis::ImportanceTable t;
  t.layers.push_back({"conv1", {}});
  for (int c = 0; c < 3; ++c) {
    dacis::ChannelImportance ci;
    ci.channel = 2 - c;
    ci.dacis = 0.1 * c;
    if (c == 1) ci.refined = 0.9;
    t.layers[0].channels.push_back(ci);
  }
  auto raw = pruner::table_scores(a, t, false);
  CHECK(raw["conv1"] == std::vector<double>{0.2, 0.1, 0.0});
  auto ref = pruner::table_scores(a, t, true);
  CHECK(ref["conv1"] == std::vector<double>{0.2, 0.9, 0.0});
  t.layers[0].channels.pop_back();
  CHECK_THROWS_AS(pruner::table_scores(a, t, false), StructuralError);
}

TEST_CASE("baseline scorers and the retention table") {
  auto n = net::make_network(net::toy_backbone({4, 6}, 3), 9);
  auto mag = pruner::magnitude_scores(n);
  CHECK(mag["conv1"].size() == 4);
  CHECK(mag["conv2"][1] == doctest::Approx(n.layers[1].weight.row(1).cwiseAbs().sum()));
  auto r1 = pruner::random_scores(n.architecture(), 3);
  auto r2 = pruner::random_scores(n.architecture(), 3);
  CHECK(r1 == r2);
  auto m = net::ChannelMask::all_true(n.architecture());
  m.keep["conv2"][0] = false;
  auto t = pruner::retention_table(n.architecture(), m);
  CHECK(t[1]["kept"] == 5);
  CHECK(t[1]["fraction"].get<double>() == doctest::Approx(5.0 / 6.0));
}

TEST_CASE("network stage prune repacks weights consistently with the mask") {
  auto n = net::make_network(net::toy_backbone({8, 16, 16}, 4), 10);
  dacis::ImportanceTable t;
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (const auto& l : n.layers) {
    if (!l.spec.is_conv()) continue;
    dacis::LayerImportance li{l.spec.name, {}};
    for (int c = 0; c < l.spec.out_channels; ++c) {
      dacis::ChannelImportance ci;
      ci.channel = c;
      ci.dacis = u(rng);
      li.channels.push_back(ci);
    }
    t.layers.push_back(li);
  }
  const auto arch = n.architecture();
  auto r = pruner::stage_prune(n, net::ChannelMask::all_true(arch), n.parameter_count(), t, 1, 0.78, {});
  CHECK(r.network.parameter_count() == r.stage.parameters);
  CHECK(r.stage.cumulative == r.stage.live_mask);
}
