#pragma once

#include <string>
#include <utility>
#include <vector>

#include "hpnet/data.hpp"
#include "hpnet/model.hpp"
#include "hpnet/taxonomy.hpp"

namespace hpnet {

/// Route of each leaf through the prototype layers, in Taxonomy::leaves() order.
struct LeafPath {
  std::size_t leaf = 0;
  std::vector<std::pair<std::size_t, std::size_t>> steps;  // (layer index, child position)
};
std::vector<LeafPath> leaf_paths(const HpnetModel& model);

/// log P(leaf | x) for every leaf: [N, #leaves], summing per-parent log-softmax along each path.
Tensor joint_log_distribution(const HpnetModel& model, const ModelOutput& output);

struct TopActivation {
  std::size_t prototype = 0;
  double score = 0.0;
  GridPos position;
};

struct HierPrediction {
  std::vector<std::vector<double>> conditionals;  // per layer, over its children
  std::vector<double> joint;                      // per leaf, Taxonomy::leaves() order
  std::vector<std::size_t> predicted_path;        // greedy argmax chain of node indices
  std::size_t joint_argmax_leaf = 0;              // taxonomy node index
  std::vector<TopActivation> top_activations;     // per layer
};

/// Predictions for every image of a batch; no graph is recorded.
std::vector<HierPrediction> predict(const HpnetModel& model, const Tensor& batch);
std::vector<HierPrediction> predict(const HpnetModel& model, const LabeledDataset& dataset,
                                    std::size_t batch_size = 32);

/// Leaf probabilities (Taxonomy::leaves() order) for one image [C,H,W] or [1,C,H,W].
std::vector<double> joint_fine_distribution(const HpnetModel& model, const Tensor& image);

struct CoarseDistribution {
  std::vector<std::size_t> nodes;  // level-k nodes (leaves shallower than k stand for themselves)
  std::vector<double> probabilities;
  std::size_t argmax() const;
};

/// Sums fine probabilities within each level-k ancestor. Throws
/// std::invalid_argument for a name that is not a leaf.
CoarseDistribution coarse_from_flat(const std::vector<std::pair<std::string, double>>& fine,
                                    const Taxonomy& taxonomy, std::size_t level);
CoarseDistribution coarse_from_flat(const std::vector<double>& fine_in_leaf_order, const Taxonomy& taxonomy,
                                    std::size_t level);

struct AccuracyReport {
  double f_id = 0.0;
  double c_id = 0.0;
  double c_novel = 0.0;
  std::size_t n_id = 0;
  std::size_t n_novel = 0;
};

/// F-ID: joint argmax leaf equals the label leaf. C-ID / C-Novel: argmax of
/// the level-1 distribution (summed from the joint over eval_taxonomy, which
/// defaults to the model's taxonomy) equals the first label element.
/// The novel dataset may be empty, in which case c_novel is 0 and n_novel 0.
AccuracyReport accuracy_suite(const HpnetModel& model, const LabeledDataset& labeled,
                              const LabeledDataset& novel, const Taxonomy* eval_taxonomy = nullptr);
double fine_accuracy(const HpnetModel& model, const LabeledDataset& labeled);

/// Smallest squared distance from a prototype to any patch of one latent
/// grid [D',H,W]; ties resolve to the first position in row-major order.
std::pair<double, GridPos> nearest_patch(const double* latent, std::size_t depth, std::size_t height,
                                         std::size_t width, const double* prototype);

/// Per-image latent grids [D',H,W] for a dataset, computed without a graph.
std::vector<std::vector<double>> dataset_latents(const HpnetModel& model, const LabeledDataset& dataset,
                                                 std::size_t batch_size = 32);

struct ClusteringQuality {
  double percentage = 0.0;
  std::vector<std::vector<double>> per_prototype;  // [layer][prototype] fraction correct
};

/// For each prototype, ranks images by their nearest patch (one candidate
/// per image, ties by image order) and counts how many of the k nearest
/// carry the prototype's allocated class. Returns the mean x 100.
ClusteringQuality clustering_quality(const std::vector<PrototypeLayer>& layers, const Taxonomy& taxonomy,
                                     const std::vector<std::vector<double>>& latents, std::size_t depth,
                                     std::size_t height, std::size_t width,
                                     const std::vector<HierarchicalLabel>& labels, std::size_t k = 5);
ClusteringQuality clustering_quality(const HpnetModel& model, const LabeledDataset& dataset, std::size_t k = 5);

/// key=value lines and a JSON document for a metrics report.
std::string metrics_text(const AccuracyReport& acc, const ClusteringQuality* quality);
std::string metrics_json(const AccuracyReport& acc, const ClusteringQuality* quality);

}  // namespace hpnet
