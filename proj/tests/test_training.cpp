#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <map>

#include "fixtures.hpp"
#include "hpnet/inference.hpp"
#include "hpnet/training.hpp"

using namespace hpnet;

namespace {

PrototypeLayer bare_layer(std::size_t children, std::vector<std::size_t> allocation) {
  PrototypeLayer l;
  l.children.resize(children);
  l.allocation = std::move(allocation);
  l.fc_weights = Tensor({children, l.allocation.size()}, true);
  return l;
}

TrainConfig quick_config(std::uint64_t seed = 3) {
  TrainConfig c;
  c.schedule = {1, 1, 1, 1, 1};
  c.batch_size = 4;
  c.seed = seed;
  return c;
}

std::map<std::string, std::vector<double>> snapshot(const HpnetModel& m) {
  std::map<std::string, std::vector<double>> out;
  for (const auto& [name, t] : m.named_parameters()) out[name] = t.values();
  return out;
}

bool is_fc(const std::string& name) { return name.size() > 3 && name.substr(name.size() - 3) == ".fc"; }

// Images of one class share a dominant colour channel.
LabeledDataset colour_dataset(const Taxonomy& t, std::size_t per_leaf, std::uint64_t seed) {
  Rng rng(seed);
  LabeledDataset ds;
  const auto leaves = t.leaves();
  for (std::size_t c = 0; c < leaves.size(); ++c) {
    for (std::size_t i = 0; i < per_leaf; ++i) {
      Image img(3, 8, 8);
      for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t p = 0; p < 64; ++p) img.pixels[ch * 64 + p] = (ch == c % 3 ? 0.9 : 0.1) + rng.uniform(-0.05, 0.05);
      ds.items.push_back({t.name(leaves[c]) + "_" + std::to_string(i), img, t.label_of(leaves[c])});
    }
  }
  return ds;
}

}  // namespace

TEST(InitFc, TwoChildrenTwoPrototypesEach) {
  auto l = bare_layer(2, {0, 0, 1, 1});
  init_fc(l);
  EXPECT_EQ(l.fc_weights.values(), (std::vector<double>{1, 1, -0.5, -0.5, -0.5, -0.5, 1, 1}));
}

TEST(InitFc, SingleChildIsAllOnes) {
  auto l = bare_layer(1, {0, 0, 0});
  init_fc(l);
  EXPECT_EQ(l.fc_weights.values(), (std::vector<double>{1, 1, 1}));
}

TEST(InitFc, ThreeChildrenEightPrototypes) {
  std::vector<std::size_t> alloc;
  for (std::size_t c = 0; c < 3; ++c) alloc.insert(alloc.end(), 8, c);
  auto l = bare_layer(3, alloc);
  init_fc(l);
  for (std::size_t c = 0; c < 3; ++c) {
    std::size_t ones = 0, halves = 0;
    for (std::size_t j = 0; j < 24; ++j) {
      const double w = l.fc_weights[c * 24 + j];
      ones += w == 1.0;
      halves += w == -0.5;
    }
    EXPECT_EQ(ones, 8u);
    EXPECT_EQ(halves, 16u);
  }
}

TEST(Schedule, DefaultProjectsEveryFiveEpochs) {
  TrainSchedule s{5, 45, 2, 10, 5};
  EXPECT_EQ(s.projection_epochs(), (std::vector<std::size_t>{5, 10, 15, 20, 25, 30, 35, 40, 45, 50}));
}

TEST(Schedule, NoAllPhaseGivesOneFinalCycle) {
  TrainSchedule s{5, 0, 2, 10, 5};
  EXPECT_EQ(s.projection_epochs(), (std::vector<std::size_t>{5}));
  TrainSchedule odd{3, 4, 1, 1, 5};
  EXPECT_EQ(odd.projection_epochs(), (std::vector<std::size_t>{5, 7}));
}

TEST(Schedule, RejectsZeros) {
  EXPECT_THROW((TrainSchedule{0, 45, 2, 10, 5}.validate()), std::invalid_argument);
  EXPECT_THROW((TrainSchedule{5, 45, 2, 10, 0}.validate()), std::invalid_argument);
  EXPECT_THROW((TrainSchedule{5, 45, 0, 10, 5}.validate()), std::invalid_argument);
}

TEST(Trainer, ConvPhaseLeavesFcBitIdentical) {
  auto tax = fixtures::taxonomy(fixtures::kTwoParent);
  HpnetModel m(tax, fixtures::tiny_config(2, 2));
  auto train = fixtures::random_dataset(*tax, 1, 8, 2);
  Trainer trainer(m, train, {}, quick_config());
  const auto before = snapshot(m);
  const auto log = trainer.run_phase_conv();
  EXPECT_TRUE(std::isfinite(log.total));
  const auto after = snapshot(m);
  for (const auto& [name, values] : before) {
    if (is_fc(name))
      EXPECT_EQ(values, after.at(name)) << name;
    else
      EXPECT_NE(values, after.at(name)) << name;
  }
}

TEST(Trainer, ConvPhaseLowersObjective) {
  auto tax = fixtures::taxonomy(fixtures::kTwoParent);
  HpnetModel m(tax, fixtures::tiny_config(4, 2));
  auto train = fixtures::random_dataset(*tax, 3, 8, 4);
  auto cfg = quick_config();
  cfg.lr_conv = 1e-2;
  cfg.ceda = false;
  Trainer trainer(m, train, {}, cfg);
  const double start = dataset_objective(m, train, cfg.weights).total;
  for (int e = 0; e < 5; ++e) trainer.run_phase_conv();
  EXPECT_LT(dataset_objective(m, train, cfg.weights).total, start);
}

TEST(Trainer, LargeRegShrinksOtherClassWeights) {
  auto tax = fixtures::taxonomy(fixtures::kTwoParent);
  HpnetModel m(tax, fixtures::tiny_config(5, 2));
  auto train = fixtures::random_dataset(*tax, 2, 8, 5);
  auto cfg = quick_config();
  cfg.weights.reg = 0.1;
  cfg.lr_all = 1e-2;
  Trainer trainer(m, train, {}, cfg);
  auto mean_other = [&] {
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& l : m.layers()) {
      const auto own = l.own_mask();
      for (std::size_t k = 0; k < own.size(); ++k)
        if (!own[k]) {
          s += std::abs(l.fc_weights[k]);
          ++n;
        }
    }
    return s / static_cast<double>(n);
  };
  const double before = mean_other();
  for (int e = 0; e < 3; ++e) trainer.run_phase_all();
  EXPECT_LT(mean_other(), before);
}

TEST(Trainer, ZeroRegWeightContributesNothing) {
  auto tax = fixtures::taxonomy(fixtures::kTwoParent);
  HpnetModel m(tax, fixtures::tiny_config(6, 1));
  auto train = fixtures::random_dataset(*tax, 1, 8, 6);
  auto cfg = quick_config();
  cfg.weights.reg = 0.0;
  Trainer trainer(m, train, {}, cfg);
  const auto log = trainer.run_phase_all();
  EXPECT_GT(log.reg, 0.0);
  EXPECT_DOUBLE_EQ(log.total, log.ce + 0.8 * *log.clust + 0.08 * *log.sep + *log.ceda);
}

TEST(Projection, MatchesBruteForceOverOwnClassPatches) {
  auto tax = fixtures::taxonomy(fixtures::kVehicleAnimal);
  HpnetModel m(tax, fixtures::tiny_config(8, 2));
  auto train = fixtures::random_dataset(*tax, 2, 8, 8);
  Trainer trainer(m, train, {}, quick_config());
  const auto old = snapshot(m);
  const auto latents = dataset_latents(m, train);
  const auto report = trainer.project_prototypes();
  const std::size_t depth = 2, hw = 16;

  std::size_t r = 0;
  for (const auto& layer : m.layers()) {
    const auto& p_old = old.at("layer." + tax->name(layer.parent) + ".prototypes");
    for (std::size_t j = 0; j < layer.num_prototypes(); ++j, ++r) {
      const auto& rec = report.records[r];
      const std::string child = tax->name(layer.children[layer.allocation[j]]);
      EXPECT_EQ(rec.child, child);
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < train.size(); ++i) {
        const auto& path = train.items[i].label.path;
        if (std::find(path.begin(), path.end(), child) == path.end()) continue;
        for (std::size_t s = 0; s < hw; ++s) {
          double d = 0.0;
          for (std::size_t k = 0; k < depth; ++k) d += std::pow(latents[i][k * hw + s] - p_old[j * depth + k], 2);
          best = std::min(best, d);
        }
      }
      EXPECT_NEAR(rec.distance, best, 1e-14);
      // Source image carries the allocated class and reproduces the prototype.
      const auto& src = train.items[rec.image_index];
      EXPECT_EQ(src.id, rec.image_id);
      const auto& path = src.label.path;
      EXPECT_NE(std::find(path.begin(), path.end(), child), path.end());
      const std::size_t s = rec.position.row * 4 + rec.position.col;
      for (std::size_t k = 0; k < depth; ++k)
        EXPECT_NEAR(layer.prototypes[j * depth + k], latents[rec.image_index][k * hw + s], 1e-12);
    }
  }
  EXPECT_EQ(r, report.records.size());
  EXPECT_TRUE(m.projected());
}

TEST(Projection, SecondProjectionIsFixedPoint) {
  auto tax = fixtures::taxonomy(fixtures::kTwoParent);
  HpnetModel m(tax, fixtures::tiny_config(9, 2));
  auto train = fixtures::random_dataset(*tax, 2, 8, 9);
  Trainer trainer(m, train, {}, quick_config());
  trainer.project_prototypes();
  const auto once = snapshot(m);
  const auto report = trainer.project_prototypes();
  EXPECT_EQ(snapshot(m), once);
  for (const auto& rec : report.records) EXPECT_EQ(rec.distance, 0.0);
}

TEST(Projection, NearestPointOnConstantLatent) {
  // Zero convolutions make every patch sigmoid(bias) = (0.25, 0.25).
  auto tax = fixtures::taxonomy(fixtures::kFlatThree);
  HpnetModel m(tax, fixtures::tiny_config(10, 3));
  for (const auto& [name, t] : m.named_parameters()) {
    if (name.rfind("layer.", 0) == 0) continue;
    Tensor tt = t;
    for (double& v : tt.data()) v = 0.0;
  }
  Tensor bias = m.adapters().back().bias;
  for (double& v : bias.data()) v = std::log(1.0 / 3.0);
  auto& layer = m.layers()[0];
  for (double& v : layer.prototypes.data()) v = 0.2;
  auto train = fixtures::random_dataset(*tax, 1, 8, 10);
  Trainer trainer(m, train, {}, quick_config());
  const auto report = trainer.project_prototypes();
  for (double v : layer.prototypes.values()) EXPECT_NEAR(v, 0.25, 1e-15);
  EXPECT_NEAR(report.records[0].distance, 2 * 0.05 * 0.05, 1e-15);
  // Three prototypes per class, one distinct own-class patch: all coincide.
  for (std::size_t j = 1; j < 3; ++j) {
    EXPECT_EQ(layer.prototypes[2 * j], layer.prototypes[0]);
    EXPECT_EQ(layer.prototypes[2 * j + 1], layer.prototypes[1]);
  }
  // Ties resolve to the lowest image id and first grid position.
  EXPECT_EQ(report.records[0].image_id, "x_0");
  EXPECT_EQ(report.records[0].position, (GridPos{0, 0}));
}

TEST(Projection, ClassWithoutImagesIsNamed) {
  auto tax = fixtures::taxonomy(fixtures::kFlatThree);
  HpnetModel m(tax, fixtures::tiny_config(11));
  auto train = fixtures::random_dataset(*tax, 1, 8, 11);
  train.items.erase(train.items.begin() + 1);  // drops y_0
  Trainer trainer(m, train, {}, quick_config());
  try {
    trainer.project_prototypes();
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("'y'"), std::string::npos) << e.what();
  }
}

TEST(Convex, OnlyFcChangesAndLossNeverRises) {
  auto tax = fixtures::taxonomy(fixtures::kVehicleAnimal);
  HpnetModel m(tax, fixtures::tiny_config(12, 2));
  auto train = fixtures::random_dataset(*tax, 2, 8, 12);
  Trainer trainer(m, train, {}, quick_config());
  trainer.project_prototypes();
  const auto before = snapshot(m);
  const auto logs = trainer.convex_optimize_fc(10);
  ASSERT_EQ(logs.size(), 10u);
  for (std::size_t e = 1; e < logs.size(); ++e) EXPECT_LE(logs[e].total, logs[e - 1].total + 1e-8);
  const auto after = snapshot(m);
  for (const auto& [name, values] : before) {
    if (is_fc(name))
      EXPECT_NE(values, after.at(name)) << name;
    else
      EXPECT_EQ(values, after.at(name)) << name;
  }
}

TEST(Convex, SeparableScoresReachFullTrainingAccuracy) {
  auto tax = fixtures::taxonomy(fixtures::kFlatThree);
  HpnetModel m(tax, fixtures::tiny_config(13, 2));
  auto train = colour_dataset(*tax, 4, 13);
  auto cfg = quick_config();
  cfg.weights.reg = 0.0;
  Trainer trainer(m, train, {}, cfg);
  trainer.project_prototypes();
  trainer.convex_optimize_fc(200);
  EXPECT_EQ(fine_accuracy(m, train), 1.0);
}

TEST(Train, SameSeedGivesIdenticalLogsAndCheckpoints) {
  auto tax = fixtures::taxonomy(fixtures::kTwoParent);
  auto train = fixtures::random_dataset(*tax, 2, 8, 14);
  auto val = fixtures::random_dataset(*tax, 1, 8, 15, Split::val);
  auto run = [&] {
    HpnetModel m(tax, fixtures::tiny_config(14, 1));
    auto cfg = quick_config(14);
    cfg.schedule = {2, 2, 1, 2, 2};
    Trainer trainer(m, train, val, cfg);
    auto result = trainer.train();
    std::vector<std::string> lines;
    for (const auto& l : result.log) lines.push_back(l.to_line());
    return std::pair{lines, serialize_checkpoint(*result.best)};
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a.first, b.first);
  EXPECT_EQ(a.second, b.second);
}

TEST(Train, ReturnsBestValidationCheckpoint) {
  auto tax = fixtures::taxonomy(fixtures::kTwoParent);
  auto train = fixtures::random_dataset(*tax, 2, 8, 16);
  auto val = fixtures::random_dataset(*tax, 2, 8, 17, Split::val);
  HpnetModel m(tax, fixtures::tiny_config(16, 1));
  auto cfg = quick_config(16);
  cfg.schedule = {1, 3, 1, 1, 1};
  Trainer trainer(m, train, val, cfg);
  std::size_t projections = 0;
  trainer.on_projection = [&](const HpnetModel&, const ProjectionReport&) { ++projections; };
  auto result = trainer.train();
  EXPECT_EQ(projections, 4u);
  EXPECT_EQ(result.projections.size(), 4u);

  double best = -1.0;
  std::size_t best_epoch = 0;
  for (const auto& l : result.log) {
    if (l.val_fine_acc && *l.val_fine_acc > best) {
      best = *l.val_fine_acc;
      best_epoch = l.epoch;
    }
  }
  EXPECT_EQ(result.best_val, best);
  EXPECT_EQ(result.best_epoch, best_epoch);
  EXPECT_EQ(fine_accuracy(*result.best, val), best);
  EXPECT_TRUE(result.best->projected());
}

TEST(Train, LogLinesFollowHeader) {
  EXPECT_STREQ(EpochLog::header(), "epoch,phase,loss_total,loss_ce,loss_clust,loss_sep,loss_reg,loss_ceda,val_fine_acc");
  EpochLog log;
  log.epoch = 5;
  log.phase = Phase::convex;
  log.total = 0.5;
  log.ce = 0.25;
  log.reg = 2.0;
  log.val_fine_acc = 1.0;
  EXPECT_EQ(log.to_line(), "5,convex,0.5,0.25,,,2,,1");
}
