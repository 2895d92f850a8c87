#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <limits>

#include "fixtures.hpp"
#include "hpnet/grad_check.hpp"
#include "hpnet/inference.hpp"
#include "hpnet/objective.hpp"
#include "hpnet/training.hpp"

using namespace hpnet;

namespace {

Tensor random_batch(std::size_t n, std::size_t size, Rng& rng) {
  return fixtures::random_tensor({n, 3, size, size}, rng, 0.0, 1.0);
}

// Layer over the root of kFlatThree (children x, y, z).
PrototypeLayer root_layer(const Taxonomy& t, std::vector<std::size_t> allocation, std::size_t depth, Rng& rng) {
  PrototypeLayer l;
  l.parent = t.root();
  l.children = t.node(t.root()).children;
  l.allocation = std::move(allocation);
  l.prototypes = fixtures::random_tensor({l.allocation.size(), depth}, rng, 0, 1);
  l.fc_weights = Tensor({l.children.size(), l.allocation.size()}, true);
  init_fc(l);
  return l;
}

// Exhaustive min over (allowed prototype, patch) for one image.
double brute_min(const Tensor& d, std::size_t n, const std::vector<std::size_t>& protos) {
  const std::size_t m = d.dim(1), hw = d.dim(2) * d.dim(3);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t j : protos)
    for (std::size_t s = 0; s < hw; ++s) best = std::min(best, d[(n * m + j) * hw + s]);
  return best;
}

}  // namespace

TEST(CrossEntropy, UniformConditionalsGiveLogFanoutProduct) {
  auto tax = fixtures::taxonomy(fixtures::kVehicleAnimal);
  HpnetModel m(tax, fixtures::tiny_config(1, 2));
  for (auto& l : m.layers())
    for (double& w : l.fc_weights.data()) w = 0.0;
  Rng rng(1);
  auto out = forward(m, random_batch(2, 8, rng));
  // Fanouts 2 (root) and 3 (vehicle).
  Tensor ce = hierarchical_cross_entropy(m, out, {{{"vehicle", "pickup"}}, {{"vehicle", "ambulance"}}});
  EXPECT_NEAR(ce.item(), 2.0 * std::log(6.0), 1e-12);
}

TEST(CrossEntropy, PerfectPredictorIsZero) {
  auto tax = fixtures::taxonomy(fixtures::kFlatThree);
  HpnetModel m(tax, fixtures::tiny_config(1));
  auto& l = m.layers()[0];
  Tensor logits({2, 3}, {1000.0, 0.0, 0.0, 0.0, 0.0, 1000.0});
  Tensor ce = layer_cross_entropy(l, logits, resolve_labels(*tax, {{{"x"}}, {{"z"}}}));
  EXPECT_EQ(ce.item(), 0.0);
}

TEST(CrossEntropy, InvalidLabelRejected) {
  auto tax = fixtures::taxonomy(fixtures::kVehicleAnimal);
  HpnetModel m(tax, fixtures::tiny_config(1));
  Rng rng(2);
  auto out = forward(m, random_batch(1, 8, rng));
  EXPECT_THROW(hierarchical_cross_entropy(m, out, {{{"animal", "truck"}}}), std::invalid_argument);
}

TEST(CrossEntropy, DecouplesThroughTheLogarithm) {
  auto tax = fixtures::taxonomy(fixtures::kVehicleAnimal);
  const auto leaves = tax->leaves();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    HpnetModel m(tax, fixtures::tiny_config(seed, 2));
    Rng rng(seed + 1000);
    for (auto& l : m.layers())
      for (double& w : l.fc_weights.data()) w = rng.uniform(-2, 2);
    Tensor batch = random_batch(3, 8, rng);
    std::vector<HierarchicalLabel> labels;
    std::vector<std::size_t> leaf_pos;
    for (int i = 0; i < 3; ++i) {
      leaf_pos.push_back(rng.below(leaves.size()));
      labels.push_back(tax->label_of(leaves[leaf_pos.back()]));
    }
    const double ce = hierarchical_cross_entropy(m, forward(m, batch), labels).item();
    double oracle = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      Tensor one({1, 3, 8, 8}, std::vector<double>(batch.values().begin() + static_cast<std::ptrdiff_t>(i * 192),
                                                  batch.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * 192)));
      oracle -= std::log(joint_fine_distribution(m, one)[leaf_pos[i]]);
    }
    EXPECT_NEAR(ce, oracle, 1e-10) << "seed " << seed;
  }
}

TEST(Clustering, DoubleMinExample) {
  auto tax = fixtures::taxonomy(fixtures::kFlatThree);
  Rng rng(0);
  auto layer = root_layer(*tax, {0, 0, 0, 1}, 1, rng);
  // Own prototypes 0..2 with per-prototype patch minima 4, 1, 9; the other-class one is at 0.5.
  Tensor d({1, 4, 1, 2}, {4.0, 6.0, 3.0, 1.0, 9.0, 12.0, 0.5, 7.0});
  const auto paths = resolve_labels(*tax, {{{"x"}}});
  EXPECT_DOUBLE_EQ(clustering_cost(layer, d, paths).item(), 1.0);
  EXPECT_DOUBLE_EQ(separation_cost(layer, d, paths).item(), -0.5);
}

TEST(Clustering, PatchOnPrototypeContributesZero) {
  auto tax = fixtures::taxonomy(fixtures::kFlatThree);
  Rng rng(0);
  auto layer = root_layer(*tax, {0, 1, 2}, 2, rng);
  Tensor z({1, 2, 1, 2}, {layer.prototypes[0], 0.9, layer.prototypes[1], 0.1});
  Tensor d = squared_distances(z, layer.prototypes);
  EXPECT_EQ(clustering_cost(layer, d, resolve_labels(*tax, {{{"x"}}})).item(), 0.0);
}

TEST(Separation, SignConvention) {
  auto tax = fixtures::taxonomy(fixtures::kFlatThree);
  Rng rng(0);
  auto layer = root_layer(*tax, {0, 1}, 1, rng);
  const auto paths = resolve_labels(*tax, {{{"x"}}});
  EXPECT_DOUBLE_EQ(separation_cost(layer, Tensor({1, 2, 1, 1}, {0.0, 2.0}), paths).item(), -2.0);
  EXPECT_DOUBLE_EQ(separation_cost(layer, Tensor({1, 2, 1, 1}, {0.0, 100.0}), paths).item(), -100.0);
}

TEST(ClusteringSeparation, MatchBruteForce) {
  auto tax = fixtures::taxonomy(fixtures::kFlatThree);
  const std::vector<std::string> names{"x", "y", "z"};
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const std::size_t n = 2 + rng.below(3), depth = 1 + rng.below(3);
    std::vector<std::size_t> alloc{0, 1, 2};
    for (std::size_t extra = rng.below(4); extra > 0; --extra) alloc.push_back(rng.below(3));
    auto layer = root_layer(*tax, alloc, depth, rng);
    Tensor z = fixtures::random_tensor({n, depth, 1 + rng.below(3), 1 + rng.below(3)}, rng, 0, 1);
    Tensor d = squared_distances(z, layer.prototypes);
    std::vector<HierarchicalLabel> labels;
    std::vector<std::size_t> cls;
    for (std::size_t i = 0; i < n; ++i) {
      cls.push_back(rng.below(3));
      labels.push_back({{names[cls.back()]}});
    }
    const auto paths = resolve_labels(*tax, labels);
    double clust = 0.0, sep = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<std::size_t> own, other;
      for (std::size_t j = 0; j < alloc.size(); ++j) (alloc[j] == cls[i] ? own : other).push_back(j);
      clust += brute_min(d, i, own);
      sep -= brute_min(d, i, other);
    }
    EXPECT_EQ(clustering_cost(layer, d, paths).item(), clust) << seed;
    EXPECT_EQ(separation_cost(layer, d, paths).item(), sep) << seed;
    EXPECT_GE(clust, 0.0);
    EXPECT_LE(sep, 0.0);
  }
}

TEST(ClusteringSeparation, OnlyImagesUnderTheParentContribute) {
  auto tax = fixtures::taxonomy(fixtures::kTwoParent);
  HpnetModel m(tax, fixtures::tiny_config(3, 2));
  Rng rng(3);
  auto out = forward(m, random_batch(2, 8, rng));
  const auto paths = resolve_labels(*tax, {{{"A", "a1"}}, {{"A", "a2"}}});
  const std::size_t b = m.layer_index(tax->index_of("B"));
  EXPECT_EQ(clustering_cost(m.layers()[b], out.layers[b].similarity.distances, paths).item(), 0.0);
  EXPECT_EQ(separation_cost(m.layers()[b], out.layers[b].similarity.distances, paths).item(), 0.0);
  EXPECT_EQ(layer_cross_entropy(m.layers()[b], out.layers[b].logits, paths).item(), 0.0);
  const std::size_t a = m.layer_index(tax->index_of("A"));
  EXPECT_GT(clustering_cost(m.layers()[a], out.layers[a].similarity.distances, paths).item(), 0.0);
}

TEST(Regularization, InitWeightsExample) {
  auto tax = fixtures::taxonomy(fixtures::kFlatThree);
  Rng rng(0);
  // One row: two own prototypes at 1, two others at -0.5.
  auto layer = root_layer(*tax, {0, 0, 1, 1}, 1, rng);
  const double total = fc_regularization(layer).item();
  // Row x: 1+1+0.5+0.5; row y: same; row z: four others at 0.5.
  EXPECT_DOUBLE_EQ(total, 3.0 + 3.0 + 2.0);
}

TEST(Regularization, ZeroAndHomogeneity) {
  auto tax = fixtures::taxonomy(fixtures::kFlatThree);
  Rng rng(1);
  auto layer = root_layer(*tax, {0, 1, 2, 0}, 1, rng);
  for (double& w : layer.fc_weights.data()) w = rng.uniform(-1, 1);
  const auto mask = layer.own_mask();
  auto parts = [&] {
    double l2 = 0.0, l1 = 0.0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      const double w = layer.fc_weights[i];
      mask[i] ? l2 += w * w : l1 += std::abs(w);
    }
    return std::pair{l2, l1};
  };
  const auto [l2, l1] = parts();
  EXPECT_NEAR(fc_regularization(layer).item(), l2 + l1, 1e-14);
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) layer.fc_weights[i] *= 3.0;
  EXPECT_NEAR(fc_regularization(layer).item(), 9.0 * l2 + l1, 1e-12);
  for (double& w : layer.fc_weights.data()) w = 0.0;
  EXPECT_EQ(fc_regularization(layer).item(), 0.0);
}

TEST(Ceda, UniformPredictionGivesLogLeaves) {
  auto tax = fixtures::taxonomy(fixtures::kFlatThree);
  HpnetModel m(tax, fixtures::tiny_config(2));
  for (double& w : m.layers()[0].fc_weights.data()) w = 0.0;
  Rng rng(5);
  auto out = forward(m, random_batch(4, 8, rng));
  EXPECT_NEAR(ceda_loss(m, out).item(), 4.0 * std::log(3.0), 1e-12);
  EXPECT_NEAR(std::log(3.0), 1.0986, 1e-4);
}

TEST(Ceda, NeverBelowLogLeaves) {
  auto tax = fixtures::taxonomy(fixtures::kVehicleAnimal);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    HpnetModel m(tax, fixtures::tiny_config(seed, 2));
    Rng rng(seed);
    for (auto& l : m.layers())
      for (double& w : l.fc_weights.data()) w = rng.uniform(-5, 5);
    auto out = forward(m, random_batch(2, 8, rng));
    EXPECT_GE(ceda_loss(m, out).item(), 2.0 * std::log(5.0) - 1e-12);
  }
}

TEST(Ceda, GradientCheck) {
  auto tax = fixtures::taxonomy(fixtures::kVehicleAnimal);
  HpnetModel m(tax, fixtures::tiny_config(4, 1));
  Rng rng(4);
  Tensor noise = random_batch(2, 8, rng);
  std::vector<Tensor> params;
  for (auto& [name, t] : m.named_parameters()) params.push_back(t);
  auto r = grad_check([&] { return ceda_loss(m, forward(m, noise)); }, params);
  EXPECT_LT(r.max_relative_error, 1e-5);
}

TEST(Objective, TotalIsWeightedSumOfParts) {
  auto tax = fixtures::taxonomy(fixtures::kVehicleAnimal);
  HpnetModel m(tax, fixtures::tiny_config(7, 2));
  Rng rng(7);
  auto out = forward(m, random_batch(3, 8, rng));
  auto noise = forward(m, random_batch(3, 8, rng));
  LossWeights w{0.8, 0.08, 1e-4};
  auto obj = compute_objective(m, out, {{{"vehicle", "pickup"}}, {{"animal", "cat"}}, {{"animal", "dog"}}}, &noise, w);
  EXPECT_NEAR(obj.total.item(), obj.breakdown.weighted_total(w), 1e-10);
  EXPECT_NEAR(obj.breakdown.total, obj.total.item(), 1e-10);
  EXPECT_GT(obj.breakdown.ceda, 0.0);
  EXPECT_EQ(obj.breakdown.parents.size(), 3u);
  const double without_reg =
      compute_objective(m, out, {{{"vehicle", "pickup"}}, {{"animal", "cat"}}, {{"animal", "dog"}}}, &noise,
                        LossWeights{0.8, 0.08, 0.0})
          .total.item();
  EXPECT_NEAR(obj.total.item() - without_reg, 1e-4 * obj.breakdown.reg(), 1e-10);
}

TEST(Objective, NegativeWeightsRejected) {
  EXPECT_THROW((LossWeights{-0.1, 0.08, 1e-4}.validate()), std::invalid_argument);
  EXPECT_THROW((LossWeights{0.8, 0.08, std::nan("")}.validate()), std::invalid_argument);
}

TEST(Objective, FullGradientCheck) {
  auto tax = fixtures::taxonomy(fixtures::kTwoParent);
  HpnetModel m(tax, fixtures::tiny_config(11, 1));
  Rng rng(11);
  Tensor batch = random_batch(2, 8, rng);
  Tensor noise = random_batch(2, 8, rng);
  const std::vector<HierarchicalLabel> labels{{{"A", "a2"}}, {{"B", "b1"}}};
  std::vector<Tensor> params;
  for (auto& [name, t] : m.named_parameters()) params.push_back(t);
  const auto start = std::chrono::steady_clock::now();
  auto r = grad_check(
      [&] {
        auto noise_out = forward(m, noise);
        return compute_objective(m, forward(m, batch), labels, &noise_out, LossWeights{0.8, 0.08, 1e-4}).total;
      },
      params);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_LT(r.max_relative_error, 1e-4);
  EXPECT_LT(secs, 10.0);
}
