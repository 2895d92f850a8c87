#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "hpnet/data.hpp"
#include "hpnet/model.hpp"
#include "hpnet/objective.hpp"
#include "hpnet/optim.hpp"

namespace hpnet {

/// w[c,j] = 1 if prototype j is allocated to child c, else -0.5.
void init_fc(PrototypeLayer& layer);

struct TrainSchedule {
  std::size_t epochs_conv = 5;
  std::size_t epochs_all = 45;
  std::size_t epochs_convex = 2;
  std::size_t epochs_convex_final = 10;
  std::size_t projection_period = 5;

  void validate() const;
  std::size_t total_epochs() const { return epochs_conv + epochs_all; }
  /// 1-based epochs after which a projection + convex cycle runs. The
  /// last epoch always closes with one.
  std::vector<std::size_t> projection_epochs() const;
};

enum class Phase { conv, all, convex };
const char* phase_name(Phase phase);

struct TrainState {
  std::size_t epoch = 0;
  Phase phase = Phase::conv;
  double best_val = -1.0;
  std::size_t since_improvement = 0;
  std::uint64_t seed = 0;
};

struct TrainConfig {
  TrainSchedule schedule;
  LossWeights weights;
  double lr_conv = 1e-3;
  double lr_all = 1e-3;
  double lr_convex = 1e-2;
  double momentum = 0.9;
  std::size_t batch_size = 16;
  bool ceda = true;
  bool augment = false;          // random resized crops on training images
  std::size_t patience = 0;      // projection cycles without improvement; 0 = never stop early
  std::uint64_t seed = 7;

  void validate() const;
};

struct ProjectionRecord {
  std::string parent;
  std::size_t prototype = 0;
  std::string child;        // allocated class
  std::string image_id;
  std::size_t image_index = 0;  // index into the training dataset
  GridPos position;
  double distance = 0.0;    // squared, before the prototype moved onto the patch
};

struct ProjectionReport {
  std::size_t epoch = 0;
  std::vector<ProjectionRecord> records;
  std::string to_json() const;
};

struct EpochLog {
  std::size_t epoch = 0;
  Phase phase = Phase::conv;
  double total = 0.0;
  double ce = 0.0;
  std::optional<double> clust, sep;
  double reg = 0.0;
  std::optional<double> ceda;
  std::optional<double> val_fine_acc;

  static const char* header();
  std::string to_line() const;
};

struct TrainResult {
  std::unique_ptr<HpnetModel> best;
  std::size_t best_epoch = 0;
  double best_val = 0.0;
  std::vector<EpochLog> log;
  std::vector<ProjectionReport> projections;  // one per cycle; best matches the one at best_epoch
  bool stopped_early = false;
};

/// Runs the alternating schedule on one model. Per-step loss is the batch
/// sum of the objective. Logged terms are per-image means except reg, which
/// is the raw penalty; loss_total counts the penalty once per epoch / n.
class Trainer {
 public:
  Trainer(HpnetModel& model, const LabeledDataset& train, const LabeledDataset& val, TrainConfig config);

  EpochLog run_phase_conv();
  EpochLog run_phase_all();
  ProjectionReport project_prototypes();
  /// Proximal gradient on each layer's FC weights over cached scores;
  /// every other parameter is left untouched. Returns one log per epoch.
  std::vector<EpochLog> convex_optimize_fc(std::size_t epochs);
  TrainResult train();

  const TrainState& state() const { return state_; }
  /// Called after every projection, before the convex step.
  std::function<void(const HpnetModel&, const ProjectionReport&)> on_projection;
  /// Called with every finished log entry.
  std::function<void(const EpochLog&)> on_log;

 private:
  EpochLog run_epoch(Phase phase, SgdOptimizer& opt);
  std::vector<std::size_t> ids_order() const;

  HpnetModel& model_;
  const LabeledDataset& train_;
  const LabeledDataset& val_;
  TrainConfig config_;
  TrainState state_;
  Rng rng_;
  LabelPaths train_paths_;
  SgdOptimizer opt_conv_;
  SgdOptimizer opt_all_;
};

/// Fixed-cost mean objective over a dataset (no noise term), used to compare models.
LossBreakdown dataset_objective(const HpnetModel& model, const LabeledDataset& data, const LossWeights& weights,
                                std::size_t batch_size = 32);

}  // namespace hpnet
