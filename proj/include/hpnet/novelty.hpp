#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hpnet/data.hpp"
#include "hpnet/model.hpp"

namespace hpnet {

struct FeatureOptions {
  bool include_root = true;  // append the root's child logits after the parent's
};

/// Logits of one image as seen by the detector for one parent.
struct LogitFeature {
  std::vector<double> values;  // parent child logits, then root logits
  std::size_t child_dim = 0;   // leading entries that belong to the parent
  std::string image_id;
  bool novel = false;

  /// Largest softmax probability over the parent's child logits.
  double max_probability() const;
};

/// Features for the selected dataset items (all items when indices is empty).
std::vector<LogitFeature> extract_features(const HpnetModel& model, const LabeledDataset& images,
                                           const std::string& parent, bool novel,
                                           const std::vector<std::size_t>& indices = {},
                                           const FeatureOptions& options = {});

enum class DetectorKind { PbThreshold, ScoreSVM, LogisticReg };
const char* detector_name(DetectorKind kind);
DetectorKind parse_detector(const std::string& name);

struct NoveltyDetector {
  DetectorKind kind = DetectorKind::LogisticReg;
  std::string parent;
  double threshold = 0.5;        // PbThreshold: max probability below this is novel
  std::vector<double> mean, scale;  // feature standardization
  std::vector<double> weights;
  double bias = 0.0;
  double penalty = 0.0;          // l2 strength chosen on the holdout

  /// Affine score on the standardized feature; positive leans novel.
  double score(const LogitFeature& feature) const;
};

struct Detection {
  bool is_novel = false;
  double p_novel = 0.0;
};

Detection detect(const NoveltyDetector& detector, const LogitFeature& feature);

struct FitOptions {
  std::vector<double> penalties{1e-4, 1e-3, 1e-2, 1e-1, 1.0};
  std::size_t svm_iterations = 3000;
};

/// Fits on train, tunes the threshold or penalty on holdout. Throws
/// std::invalid_argument when train lacks either class.
NoveltyDetector fit_detector(DetectorKind kind, const std::string& parent, const std::vector<LogitFeature>& train,
                             const std::vector<LogitFeature>& holdout, const FitOptions& options = {});

double detector_accuracy(const NoveltyDetector& detector, const std::vector<LogitFeature>& features);

/// P(parent | x) from the model, the product of conditionals down to parent.
double parent_probability(const HpnetModel& model, const Tensor& image, const std::string& parent);
/// p_novel(parent) * P(parent | x).
double joint_novel_probability(const HpnetModel& model, const NoveltyDetector& detector, const Tensor& image,
                               const FeatureOptions& options = {});

/// Parent at which a novel item's label leaves the taxonomy, and the unseen class name.
struct NoveltyPlacement {
  std::size_t parent = 0;
  std::string novel_class;
  bool valid = false;
};
NoveltyPlacement novelty_placement(const Taxonomy& taxonomy, const HierarchicalLabel& label);

struct LocoOptions {
  std::uint64_t seed = 7;
  std::size_t holdout = 50;  // balanced holdout carved from the fold's training set
  FeatureOptions features;
  FitOptions fit;
};

struct LocoFold {
  std::string novel_class;
  double accuracy = 0.0;
  std::size_t n_train = 0;    // per side
  std::size_t n_holdout = 0;  // per side
  std::size_t n_test = 0;     // per side
};

struct LocoParent {
  std::string parent;
  std::vector<LocoFold> folds;
  double accuracy = 0.0;
};

struct LocoReport {
  DetectorKind kind = DetectorKind::LogisticReg;
  std::vector<LocoParent> parents;
  double overall = 0.0;
  std::vector<std::string> warnings;
  std::string to_json() const;
};

/// One fold per novel class under each parent with at least two novel
/// classes. Detectors are fitted on familiar_train items and the other novel
/// classes, then tested on familiar_test items against the held-out class.
/// Every set is balanced by seeded subsampling.
LocoReport loco_evaluate(const HpnetModel& model, DetectorKind kind, const LabeledDataset& familiar_train,
                         const LabeledDataset& familiar_test, const LabeledDataset& novel,
                         const LocoOptions& options = {});

/// Detectors fitted on all novel classes of each eligible parent.
std::vector<NoveltyDetector> fit_parent_detectors(const HpnetModel& model, DetectorKind kind,
                                                  const LabeledDataset& familiar, const LabeledDataset& novel,
                                                  const LocoOptions& options = {});

/// Sidecar document tying detectors to a checkpoint digest.
std::string detectors_to_json(const std::vector<NoveltyDetector>& detectors, std::uint64_t checkpoint_hash);
/// Throws std::runtime_error when the stored digest differs from expected.
std::vector<NoveltyDetector> detectors_from_json(const std::string& text, std::uint64_t expected_checkpoint_hash);

}  // namespace hpnet
