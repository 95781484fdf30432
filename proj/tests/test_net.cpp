#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "pmp/errors.hpp"
#include "pmp/net.hpp"

using namespace pmp;
using namespace pmp::net;
using Eigen::MatrixXd;

namespace {

Batch random_batch(int n, int channels, int size, std::uint64_t seed, int classes) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Batch b;
  b.channels = channels;
  b.height = b.width = size;
  b.data.resize(channels, static_cast<Eigen::Index>(n) * size * size);
  for (Eigen::Index i = 0; i < b.data.size(); ++i) b.data.data()[i] = u(rng);
  for (int i = 0; i < n; ++i) b.labels.push_back(i % classes);
  return b;
}

ChannelMask random_mask(const Architecture& arch, std::mt19937_64& rng, double keep_p) {
  std::bernoulli_distribution keep(keep_p);
  auto m = ChannelMask::all_true(arch);
  for (auto& [name, v] : m.keep) {
    for (std::size_t c = 0; c < v.size(); ++c) v[c] = keep(rng);
    if (std::none_of(v.begin(), v.end(), [](bool x) { return x; })) v[rng() % v.size()] = true;
  }
  return m;
}

double max_abs_diff(const MatrixXd& a, const MatrixXd& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("all-true mask matches the unmasked forward") {
  auto net = make_network(toy_backbone({8, 16, 16}, 5, 3, 16), 1);
  auto batch = random_batch(4, 3, 16, 2, 5);
  auto plain = forward(net, batch);
  auto [logits, acts] = forward_with_stats(net, ChannelMask::all_true(net.architecture()), batch);
  CHECK(max_abs_diff(plain.logits, logits) == 0.0);
  CHECK(logits.rows() == 4);
  CHECK(logits.cols() == 5);
  CHECK(acts.layers.size() == 3);
  CHECK(acts.at("conv2").pooled.rows() == 4);
  CHECK(acts.at("conv2").pooled.cols() == 16);
}

TEST_CASE("masking a dead channel leaves logits unchanged") {
  auto net = make_network(toy_backbone({6, 6}, 3, 3, 8), 3);
  // conv1 channel 2 feeds nothing: zero its outgoing weights in conv2
  net.layers[1].weight.middleCols(2 * 9, 9).setZero();
  auto mask = ChannelMask::all_true(net.architecture());
  mask.keep["conv1"][2] = false;
  auto batch = random_batch(3, 3, 8, 4, 3);
  auto plain = forward(net, batch);
  auto [logits, acts] = forward_with_stats(net, mask, batch);
  CHECK(max_abs_diff(plain.logits, logits) < 1e-15);
  CHECK(acts.at("conv1").pooled.cols() == 5);
  CHECK(acts.at("conv1").channels == std::vector<int>{0, 1, 3, 4, 5});
}

TEST_CASE("GAP activations of a hand-set one-layer net") {
  Architecture arch;
  arch.input_channels = 1;
  arch.input_size = 2;
  LayerSpec conv{.name = "conv1", .kind = LayerKind::Conv, .in_channels = 1, .out_channels = 2, .kernel = 3};
  LayerSpec fc{.name = "fc", .kind = LayerKind::FullyConnected, .in_channels = 2, .out_channels = 2};
  arch.layers = {conv, fc};
  auto net = make_network(arch, 0);
  net.layers[0].weight.row(0).setOnes();  // every 3x3 window covers the whole 2x2 image: 1+2+3+4
  net.layers[0].weight.row(1).setZero();
  net.layers[0].weight(1, 4) = 1.0;  // centre tap only
  net.layers[0].bias << 0.0, -2.5;   // relu(x - 2.5) over {1,2,3,4} -> {0,0,0.5,1.5}
  Batch b;
  b.channels = 1;
  b.height = b.width = 2;
  b.data.resize(1, 4);
  b.data << 1, 2, 3, 4;
  b.labels = {0};
  auto [logits, acts] = forward_with_stats(net, ChannelMask::all_true(arch), b);
  CHECK(acts.at("conv1").pooled(0, 0) == doctest::Approx(10.0));
  CHECK(acts.at("conv1").pooled(0, 1) == doctest::Approx(0.5));
}

TEST_CASE("forward rejects empty and mis-shaped batches") {
  auto net = make_network(toy_backbone({4}, 2, 3, 8), 1);
  Batch empty;
  empty.channels = 3;
  empty.height = empty.width = 8;
  CHECK_THROWS_AS(forward(net, empty), ArgumentError);
  auto wrong = random_batch(2, 1, 8, 1, 2);
  CHECK_THROWS_AS(forward(net, wrong), StructuralError);
  auto mask = ChannelMask::all_true(net.architecture());
  mask.keep.erase("conv1");
  CHECK_THROWS_AS(forward_with_stats(net, mask, random_batch(2, 3, 8, 1, 2)), StructuralError);
}

TEST_CASE("repack with all-true mask is structurally identical") {
  auto net = make_network(toy_backbone({8, 8}, 5, 3, 8), 5);
  auto packed = repack_network(net, ChannelMask::all_true(net.architecture()));
  CHECK(packed.parameter_count() == net.parameter_count());
  for (std::size_t i = 0; i < net.layers.size(); ++i) CHECK(packed.layers[i].weight == net.layers[i].weight);
}

TEST_CASE("repack of the 8->8->5 toy removes exactly the matching slices") {
  Architecture arch;
  arch.input_channels = 2;
  arch.input_size = 8;
  arch.layers = {
      LayerSpec{.name = "conv1", .kind = LayerKind::Conv, .in_channels = 2, .out_channels = 8, .kernel = 3},
      LayerSpec{.name = "conv2", .kind = LayerKind::Conv, .in_channels = 8, .out_channels = 8, .kernel = 3},
      LayerSpec{.name = "fc", .kind = LayerKind::FullyConnected, .in_channels = 8, .out_channels = 5}};
  auto net = make_network(arch, 9);
  auto mask = ChannelMask::all_true(arch);
  mask.keep["conv1"][1] = mask.keep["conv1"][4] = mask.keep["conv1"][6] = false;
  auto packed = repack_network(net, mask);
  // 3 filters of 2*9 weights, 3 biases, and 3 input slices of 8*9 in conv2
  const std::int64_t removed = 3 * 2 * 9 + 3 + 8 * 3 * 9;
  CHECK(net.parameter_count() - packed.parameter_count() == removed);
  CHECK(packed.layers[1].weight.cols() == 5 * 9);
  CHECK(packed.layers[1].weight.middleCols(2 * 9, 9) == net.layers[1].weight.middleCols(3 * 9, 9));
}

TEST_CASE("repack refuses a mask that empties a layer") {
  auto net = make_network(toy_backbone({3, 3}, 2, 3, 8), 1);
  auto mask = ChannelMask::all_true(net.architecture());
  mask.keep["conv2"] = {false, false, false};
  CHECK_THROWS_AS(repack_network(net, mask), StructuralError);
}

TEST_CASE("property: repacked forward equals masked forward") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 25; ++trial) {
    const int depth = 1 + static_cast<int>(rng() % 4);
    std::vector<int> widths;
    for (int d = 0; d < depth; ++d) widths.push_back(2 + static_cast<int>(rng() % 12));
    auto arch = toy_backbone(widths, 2 + static_cast<int>(rng() % 5), 3, 16);
    auto net = make_network(arch, rng());
    for (auto& l : net.layers) l.bias.setRandom();
    auto mask = random_mask(arch, rng, 0.6);
    auto batch = random_batch(3, 3, 16, rng(), 2);
    auto [masked, acts] = forward_with_stats(net, mask, batch);
    auto packed = repack_network(net, mask);
    auto dense = forward(packed, batch);
    CHECK(max_abs_diff(masked, dense.logits) < 1e-6);
  }
}

TEST_CASE("cost accounting examples") {
  Architecture single;
  single.input_channels = 1;
  single.layers = {LayerSpec{.name = "c", .kind = LayerKind::Conv, .in_channels = 1, .out_channels = 10}};
  auto r = count_cost(single, 1, EnergyModel{1.0, 0.0});
  CHECK(r.macs == 10);
  CHECK(r.energy_mj == doctest::Approx(10.0));
  CHECK(count_cost(single, 1, EnergyModel{0.0, 0.0}).energy_mj == 0.0);

  Architecture c48;
  c48.input_channels = 4;
  c48.layers = {LayerSpec{.name = "c", .kind = LayerKind::Conv, .in_channels = 4, .out_channels = 8, .kernel = 3}};
  CHECK(count_cost(c48, 16).macs == 73728);
  CHECK_THROWS_AS(count_cost(c48, 16, EnergyModel{-1.0, 0.0}), ArgumentError);
}

TEST_CASE("property: cost is monotone under mask inclusion and matches a tally") {
  std::mt19937_64 rng(5);
  auto arch = toy_backbone({8, 16, 16, 32}, 10, 3, 32);
  auto net = make_network(arch, 1);
  for (int trial = 0; trial < 30; ++trial) {
    auto m2 = random_mask(arch, rng, 0.8);
    auto m1 = m2;
    for (auto& [name, v] : m1.keep)
      for (std::size_t c = 0; c < v.size(); ++c)
        if (v[c] && rng() % 3 == 0 && std::count(v.begin(), v.end(), true) > 1) v[c] = false;
    REQUIRE(m1.subset_of(m2));
    auto c1 = count_cost(repack_architecture(arch, m1), 32);
    auto c2 = count_cost(repack_architecture(arch, m2), 32);
    CHECK(c1.parameters <= c2.parameters);
    CHECK(c1.macs <= c2.macs);
    CHECK(c1.energy_mj <= c2.energy_mj);

    auto packed = repack_network(net, m1);
    std::int64_t tally = 0;
    for (const auto& l : packed.layers) {
      for (Eigen::Index t = 0; t < l.weight.size(); ++t) ++tally;
      for (Eigen::Index t = 0; t < l.bias.size(); ++t) ++tally;
    }
    CHECK(c1.parameters == tally);
  }
}

TEST_CASE("ResNet-18 reference shape has about 11.2M parameters") {
  auto arch = resnet18_reference();
  const auto p = count_cost(arch, 224).parameters;
  CHECK(p > 11'150'000);
  CHECK(p < 11'250'000);
  CHECK(arch.consumers_of(*arch.find("layer1.1.conv2")).size() == 2);
}

TEST_CASE("backward matches central finite differences") {
  auto arch = toy_backbone({3, 4}, 3, 2, 8, 0.0);
  auto net = make_network(arch, 11);
  for (auto& l : net.layers) l.bias.setConstant(0.05);
  auto batch = random_batch(3, 2, 8, 12, 3);
  ForwardOptions fo;
  fo.keep_cache = true;
  auto fwd = forward(net, batch, fo);
  auto ce = softmax_cross_entropy(fwd.logits, batch.labels);
  auto grads = backward_from_logits(net, fwd, ce.grad);
  auto flat = flatten_parameters(net);
  auto g = flatten_gradients(grads);
  const double h = 1e-5;
  for (Eigen::Index k = 0; k < flat.size(); k += 7) {
    auto plus = flat, minus = flat;
    plus(k) += h;
    minus(k) -= h;
    Network a = net, b = net;
    assign_parameters(a, plus);
    assign_parameters(b, minus);
    const double lp = softmax_cross_entropy(forward(a, batch).logits, batch.labels).loss;
    const double lm = softmax_cross_entropy(forward(b, batch).logits, batch.labels).loss;
    CHECK(g(k) == doctest::Approx((lp - lm) / (2 * h)).epsilon(1e-4).scale(1e-6));
  }
}

TEST_CASE("embedding backward matches finite differences") {
  auto net = make_network(toy_backbone({3, 4}, 3, 2, 8, 0.0), 21);
  auto batch = random_batch(2, 2, 8, 22, 3);
  Eigen::VectorXd dir = Eigen::VectorXd::LinSpaced(4, 0.5, 2.0);
  // loss = sum_b <embedding_b, dir>
  ForwardOptions fo;
  fo.keep_cache = true;
  fo.stop_at_embedding = true;
  auto fwd = forward(net, batch, fo);
  MatrixXd ge = dir.transpose().replicate(2, 1);
  auto g = flatten_gradients(backward_from_embedding(net, fwd, ge));
  auto flat = flatten_parameters(net);
  auto loss = [&](const Eigen::VectorXd& p) {
    Network n = net;
    assign_parameters(n, p);
    ForwardOptions o;
    o.stop_at_embedding = true;
    return (forward(n, batch, o).embedding * dir).sum();
  };
  for (Eigen::Index k = 0; k < flat.size(); k += 5) {
    auto p = flat, m = flat;
    p(k) += 1e-5;
    m(k) -= 1e-5;
    CHECK(g(k) == doctest::Approx((loss(p) - loss(m)) / 2e-5).epsilon(1e-4).scale(1e-6));
  }
}

TEST_CASE("checkpoint and mask files round-trip") {
  auto net = make_network(toy_backbone({4, 6}, 3, 3, 8), 8);
  const auto dir = std::filesystem::temp_directory_path();
  const auto ck = (dir / "pmp_test.ckpt").string();
  save_checkpoint(net, ck);
  auto back = load_checkpoint(ck);
  REQUIRE(back.layers.size() == net.layers.size());
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    CHECK(back.layers[i].weight == net.layers[i].weight);
    CHECK(back.layers[i].spec.name == net.layers[i].spec.name);
  }
  auto mask = ChannelMask::all_true(net.architecture());
  mask.keep["conv2"][3] = false;
  const auto mp = (dir / "pmp_test_mask.json").string();
  save_mask(mask, mp);
  CHECK(load_mask(mp) == mask);
  CHECK(mask_to_json(mask)["conv2"].dump() == "[1,1,1,0,1,1]");
}

TEST_CASE("compose_masks maps a live mask back to original indices") {
  ChannelMask prior;
  prior.keep["c"] = {true, false, true, true, false};
  ChannelMask live;
  live.keep["c"] = {false, true, true};
  auto out = compose_masks(prior, live);
  CHECK(out.keep["c"] == std::vector<bool>{false, false, true, true, false});
  CHECK(out.subset_of(prior));
}
