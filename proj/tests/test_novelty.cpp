#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include <json.hpp>

#include "fixtures.hpp"
#include "hpnet/inference.hpp"
#include "hpnet/novelty.hpp"

using namespace hpnet;

namespace {

LogitFeature feature(std::vector<double> values, bool novel, std::size_t child_dim = 0) {
  LogitFeature f;
  f.child_dim = child_dim ? child_dim : values.size();
  f.values = std::move(values);
  f.novel = novel;
  return f;
}

// Three child logits whose largest softmax probability is p.
LogitFeature with_max_prob(double p, bool novel) {
  const double rest = (1.0 - p) / 2.0;
  return feature({std::log(p), std::log(rest), std::log(rest)}, novel);
}

std::vector<LogitFeature> gaussian_clouds(std::size_t per_side, double gap, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<LogitFeature> out;
  for (std::size_t i = 0; i < per_side; ++i) {
    out.push_back(feature({rng.normal() * 0.3 - gap, rng.normal() * 0.3 + 1.0}, false));
    out.push_back(feature({rng.normal() * 0.3 + gap, rng.normal() * 0.3 - 1.0}, true));
  }
  return out;
}

const DetectorKind kAll[] = {DetectorKind::PbThreshold, DetectorKind::ScoreSVM, DetectorKind::LogisticReg};

LabeledDataset novel_set(const std::vector<std::pair<HierarchicalLabel, std::size_t>>& groups, std::uint64_t seed) {
  Rng rng(seed);
  LabeledDataset ds;
  ds.split = Split::novel;
  for (const auto& [label, count] : groups) {
    for (std::size_t i = 0; i < count; ++i) {
      ds.items.push_back({label.path.back() + "_" + std::to_string(i), fixtures::random_image(8, rng), label});
    }
  }
  return ds;
}

}  // namespace

TEST(Features, LayoutAndDeterminism) {
  auto tax = fixtures::taxonomy(fixtures::kVehicleAnimal);
  HpnetModel m(tax, fixtures::tiny_config(1, 2));
  auto data = fixtures::random_dataset(*tax, 1, 8, 1);
  data.items.push_back(data.items.front());
  const auto f = extract_features(m, data, "vehicle", false);
  ASSERT_EQ(f.size(), 6u);
  EXPECT_EQ(f[0].values.size(), 3u + 2u);
  EXPECT_EQ(f[0].child_dim, 3u);
  EXPECT_EQ(f.front().values, f.back().values);
  EXPECT_EQ(f[2].image_id, data.items[2].id);

  const auto root = extract_features(m, data, "root", true, {1, 3});
  ASSERT_EQ(root.size(), 2u);
  EXPECT_EQ(root[0].values.size(), 4u);
  EXPECT_TRUE(root[0].novel);
  EXPECT_EQ(root[1].image_id, data.items[3].id);

  const auto bare = extract_features(m, data, "animal", false, {}, FeatureOptions{false});
  EXPECT_EQ(bare[0].values.size(), 2u);
}

TEST(Features, UniformModelGivesReciprocalMaxProbability) {
  auto tax = fixtures::taxonomy(fixtures::kVehicleAnimal);
  HpnetModel m(tax, fixtures::tiny_config(2, 2));
  for (auto& l : m.layers())
    for (double& w : l.fc_weights.data()) w = 0.0;
  auto data = fixtures::random_dataset(*tax, 1, 8, 2);
  for (const auto& f : extract_features(m, data, "vehicle", false)) EXPECT_NEAR(f.max_probability(), 1.0 / 3.0, 1e-15);
  for (const auto& f : extract_features(m, data, "animal", false)) EXPECT_NEAR(f.max_probability(), 0.5, 1e-15);
}

TEST(PbThreshold, SeparableOneDimensional) {
  std::vector<LogitFeature> train{with_max_prob(0.9, false), with_max_prob(0.95, false), with_max_prob(0.4, true),
                                  with_max_prob(0.5, true)};
  auto d = fit_detector(DetectorKind::PbThreshold, "vehicle", train, train);
  EXPECT_GT(d.threshold, 0.5);
  EXPECT_LT(d.threshold, 0.9);
  EXPECT_EQ(detector_accuracy(d, train), 1.0);
}

TEST(PbThreshold, DetectExamples) {
  NoveltyDetector d;
  d.kind = DetectorKind::PbThreshold;
  d.threshold = 0.8;
  auto familiar = detect(d, with_max_prob(0.9, false));
  EXPECT_FALSE(familiar.is_novel);
  EXPECT_EQ(familiar.p_novel, 0.0);
  auto novel = detect(d, with_max_prob(0.6, false));
  EXPECT_TRUE(novel.is_novel);
  EXPECT_EQ(novel.p_novel, 1.0);
}

TEST(Detectors, LinearlySeparableCloudsReachFullAccuracy) {
  const auto train = gaussian_clouds(40, 2.0, 3);
  const auto hold = gaussian_clouds(10, 2.0, 4);
  for (DetectorKind kind : {DetectorKind::ScoreSVM, DetectorKind::LogisticReg}) {
    auto d = fit_detector(kind, "p", train, hold);
    EXPECT_EQ(detector_accuracy(d, train), 1.0) << detector_name(kind);
    EXPECT_EQ(detector_accuracy(d, hold), 1.0) << detector_name(kind);
  }
}

TEST(Detectors, AllKindsSeparateWellSplitProbabilities) {
  std::vector<LogitFeature> train;
  for (double p : {0.8, 0.85, 0.9, 0.95}) train.push_back(with_max_prob(p, false));
  for (double p : {0.34, 0.4, 0.45, 0.5}) train.push_back(with_max_prob(p, true));
  for (DetectorKind kind : kAll) {
    auto d = fit_detector(kind, "p", train, train);
    EXPECT_EQ(detector_accuracy(d, train), 1.0) << detector_name(kind);
  }
}

TEST(Detectors, XorIsNotLinearlySeparable) {
  const std::vector<LogitFeature> xs{feature({0, 0}, false), feature({1, 1}, false), feature({0, 1}, true),
                                     feature({1, 0}, true)};
  // Exhaustive oracle over a grid of linear separators w1 x + w2 y + b > 0.
  double oracle = 0.0;
  for (int i = -20; i <= 20; ++i)
    for (int j = -20; j <= 20; ++j)
      for (int k = -40; k <= 40; ++k) {
        std::size_t correct = 0;
        for (const auto& f : xs) correct += (0.1 * i * f.values[0] + 0.1 * j * f.values[1] + 0.05 * k > 0) == f.novel;
        oracle = std::max(oracle, correct / 4.0);
      }
  EXPECT_EQ(oracle, 0.75);
  for (DetectorKind kind : {DetectorKind::ScoreSVM, DetectorKind::LogisticReg}) {
    auto d = fit_detector(kind, "p", xs, xs);
    EXPECT_LE(detector_accuracy(d, xs), 0.75) << detector_name(kind);
  }
}

TEST(Detectors, SingleClassTrainingRejected) {
  std::vector<LogitFeature> train{feature({1.0}, false), feature({2.0}, false)};
  for (DetectorKind kind : kAll) EXPECT_THROW(fit_detector(kind, "p", train, {}), std::invalid_argument);
}

TEST(Detectors, ZeroLogisticIsHalf) {
  NoveltyDetector d;
  d.kind = DetectorKind::LogisticReg;
  d.mean = {0.0, 0.0};
  d.scale = {1.0, 1.0};
  d.weights = {0.0, 0.0};
  EXPECT_EQ(detect(d, feature({3.0, -1.0}, false)).p_novel, 0.5);
  d.weights = {0.7, -0.2};
  double last = 0.0;
  for (double x = -10; x <= 10; x += 0.5) {
    const double p = detect(d, feature({x, 0.0}, false)).p_novel;
    EXPECT_GE(p, last);
    last = p;
  }
  EXPECT_THROW(detect(d, feature({1.0}, false)), DimensionError);
}

TEST(Detectors, NamesRoundTrip) {
  for (DetectorKind kind : kAll) EXPECT_EQ(parse_detector(detector_name(kind)), kind);
  EXPECT_THROW(parse_detector("OpenMax"), std::invalid_argument);
}

TEST(JointNovel, ProductWithParentProbability) {
  auto tax = fixtures::taxonomy(fixtures::kVehicleAnimal);
  HpnetModel m(tax, fixtures::tiny_config(5, 2));
  Rng rng(5);
  Tensor img = fixtures::random_tensor({3, 8, 8}, rng, 0, 1);
  // Root logits differ by c * sum(scores); choose c so that P(vehicle | x) = 0.9.
  const auto out = forward(m, Tensor({1, 3, 8, 8}, img.values()));
  const auto s = out.layers[0].similarity.scores.values();
  const double total = std::accumulate(s.begin(), s.end(), 0.0);
  auto& root = m.layers()[0];
  const std::size_t mp = root.num_prototypes();
  for (std::size_t j = 0; j < mp; ++j) {
    root.fc_weights[j] = std::log(9.0) / total;
    root.fc_weights[mp + j] = 0.0;
  }
  EXPECT_NEAR(parent_probability(m, img, "vehicle"), 0.9, 1e-12);

  NoveltyDetector d;
  d.kind = DetectorKind::LogisticReg;
  d.parent = "vehicle";
  d.mean.assign(5, 0.0);
  d.scale.assign(5, 1.0);
  d.weights.assign(5, 0.0);
  d.bias = std::log(0.7 / 0.3);
  EXPECT_NEAR(joint_novel_probability(m, d, img), 0.63, 1e-12);

  for (std::size_t j = 0; j < mp; ++j) root.fc_weights[j] = -1e4;
  EXPECT_EQ(joint_novel_probability(m, d, img), 0.0);
}

TEST(Placement, FindsWhereTheLabelLeavesTheTaxonomy) {
  auto tax = fixtures::taxonomy(fixtures::kVehicleAnimal);
  auto p = novelty_placement(*tax, {{"vehicle", "forklift"}});
  EXPECT_TRUE(p.valid);
  EXPECT_EQ(tax->name(p.parent), "vehicle");
  EXPECT_EQ(p.novel_class, "forklift");
  auto r = novelty_placement(*tax, {{"plant"}});
  EXPECT_TRUE(r.valid);
  EXPECT_EQ(r.parent, tax->root());
  EXPECT_EQ(r.novel_class, "plant");
  EXPECT_FALSE(novelty_placement(*tax, {{"vehicle", "pickup"}}).valid);
}

TEST(Loco, FoldsPerNovelClassAndBalancedSizes) {
  auto tax = fixtures::taxonomy(fixtures::kTwoParent);
  HpnetModel m(tax, fixtures::tiny_config(6, 2));
  auto fam_train = fixtures::random_dataset(*tax, 4, 8, 6);                 // 8 images under A
  auto fam_test = fixtures::random_dataset(*tax, 3, 8, 7, Split::test);     // 6 under A
  auto novel = novel_set({{{{"A", "a3"}}, 2}, {{{"A", "a4"}}, 10}, {{{"A", "a5"}}, 10}, {{{"A", "a6"}}, 10},
                          {{{"B", "b3"}}, 5}},
                         8);
  LocoOptions opt;
  opt.holdout = 4;
  for (DetectorKind kind : kAll) {
    const auto r = loco_evaluate(m, kind, fam_train, fam_test, novel, opt);
    ASSERT_EQ(r.parents.size(), 1u);
    const auto& a = r.parents[0];
    EXPECT_EQ(a.parent, "A");
    ASSERT_EQ(a.folds.size(), 4u);
    double mean = 0.0;
    for (const auto& f : a.folds) {
      // Train + holdout per side = min(8 familiar, other-class novel count).
      EXPECT_EQ(f.n_train + f.n_holdout, 8u) << f.novel_class;
      EXPECT_EQ(f.n_holdout, 2u);
      EXPECT_EQ(f.n_test, f.novel_class == "a3" ? 2u : 6u);
      EXPECT_GE(f.accuracy, 0.0);
      EXPECT_LE(f.accuracy, 1.0);
      mean += f.accuracy / 4.0;
    }
    EXPECT_NEAR(a.accuracy, mean, 1e-15);
    EXPECT_EQ(r.overall, a.accuracy);
    // Root has no novel classes, B only one.
    EXPECT_EQ(r.warnings.size(), 2u);
    auto doc = nlohmann::json::parse(r.to_json());
    EXPECT_EQ(doc["parents"][0]["folds"].size(), 4u);
    EXPECT_EQ(doc["detector"], detector_name(kind));
  }
}

TEST(Loco, DeterministicUnderSeed) {
  auto tax = fixtures::taxonomy(fixtures::kTwoParent);
  HpnetModel m(tax, fixtures::tiny_config(9, 2));
  auto fam_train = fixtures::random_dataset(*tax, 4, 8, 9);
  auto fam_test = fixtures::random_dataset(*tax, 2, 8, 10, Split::test);
  auto novel = novel_set({{{{"B", "b3"}}, 4}, {{{"B", "b4"}}, 4}, {{{"B", "b5"}}, 4}}, 11);
  const auto a = loco_evaluate(m, DetectorKind::ScoreSVM, fam_train, fam_test, novel);
  const auto b = loco_evaluate(m, DetectorKind::ScoreSVM, fam_train, fam_test, novel);
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_EQ(a.parents.at(0).folds.size(), 3u);
}

TEST(Loco, NovelLabelInsideTaxonomyRejected) {
  auto tax = fixtures::taxonomy(fixtures::kTwoParent);
  HpnetModel m(tax, fixtures::tiny_config(12));
  auto fam = fixtures::random_dataset(*tax, 1, 8, 12);
  auto novel = novel_set({{{{"A", "a1"}}, 1}}, 13);
  EXPECT_THROW(loco_evaluate(m, DetectorKind::LogisticReg, fam, fam, novel), std::invalid_argument);
}

TEST(Sidecar, RoundTripAndDigestCheck) {
  auto tax = fixtures::taxonomy(fixtures::kTwoParent);
  HpnetModel m(tax, fixtures::tiny_config(14, 2));
  auto fam = fixtures::random_dataset(*tax, 4, 8, 14);
  auto novel = novel_set({{{{"A", "a3"}}, 4}, {{{"A", "a4"}}, 4}}, 15);
  const auto dets = fit_parent_detectors(m, DetectorKind::LogisticReg, fam, novel);
  ASSERT_EQ(dets.size(), 1u);
  EXPECT_EQ(dets[0].parent, "A");
  const std::string text = detectors_to_json(dets, 0xabcdefULL);
  const auto back = detectors_from_json(text, 0xabcdefULL);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].weights, dets[0].weights);
  EXPECT_EQ(back[0].bias, dets[0].bias);
  EXPECT_EQ(back[0].kind, dets[0].kind);
  const auto feats = extract_features(m, novel, "A", true);
  for (const auto& f : feats) EXPECT_EQ(detect(back[0], f).p_novel, detect(dets[0], f).p_novel);
  EXPECT_THROW(detectors_from_json(text, 0xabcdeeULL), std::runtime_error);
}
