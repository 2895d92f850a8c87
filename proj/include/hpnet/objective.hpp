#pragma once

#include <string>
#include <vector>

#include "hpnet/model.hpp"
#include "hpnet/taxonomy.hpp"
#include "hpnet/tensor.hpp"

namespace hpnet {

struct LossWeights {
  double clust = 0.8;   // lambda1
  double sep = 0.08;    // lambda2
  double reg = 1e-4;    // lambda3
  void validate() const;
};

struct ParentLoss {
  std::string parent;
  double cross_entropy = 0.0;
  double clust = 0.0;
  double sep = 0.0;
  double reg = 0.0;
};

struct LossBreakdown {
  std::vector<ParentLoss> parents;
  double ceda = 0.0;
  double total = 0.0;

  double cross_entropy() const;
  double clust() const;
  double sep() const;
  double reg() const;
  /// CE + l1*Clust + l2*Sep + l3*Reg + CEDA recomputed from the parts.
  double weighted_total(const LossWeights& w) const;
};

struct Objective {
  Tensor total;  // scalar, differentiable
  LossBreakdown breakdown;
};

/// Node indices of each label path; throws std::invalid_argument on an invalid label.
using LabelPaths = std::vector<std::vector<std::size_t>>;
LabelPaths resolve_labels(const Taxonomy& taxonomy, const std::vector<HierarchicalLabel>& labels);

/// Child position at this layer for each image, or kNoIndex if its path
/// does not pass through the layer's parent.
std::vector<std::size_t> child_targets(const PrototypeLayer& layer, const LabelPaths& paths);

/// -sum over contributing images of log P(child | parent, x).
Tensor layer_cross_entropy(const PrototypeLayer& layer, const Tensor& logits, const LabelPaths& paths);
Tensor hierarchical_cross_entropy(const HpnetModel& model, const ModelOutput& output,
                                  const std::vector<HierarchicalLabel>& labels);

/// Sum over contributing images of the smallest squared distance between
/// any patch and any own-class prototype. distances is [N,m,H,W].
Tensor clustering_cost(const PrototypeLayer& layer, const Tensor& distances, const LabelPaths& paths);
/// Negative sum over contributing images of the smallest squared distance
/// between any patch and any other-class prototype. Always <= 0.
Tensor separation_cost(const PrototypeLayer& layer, const Tensor& distances, const LabelPaths& paths);

/// Sum of squared own-class weights plus absolute other-class weights.
Tensor fc_regularization(const PrototypeLayer& layer);

/// Cross entropy between the joint leaf distribution and the uniform
/// distribution, summed over the noise batch. Minimum log(#leaves) per image.
Tensor ceda_loss(const HpnetModel& model, const ModelOutput& noise_output);

/// Full objective on an image batch, with the CEDA term when noise_output is given.
Objective compute_objective(const HpnetModel& model, const ModelOutput& output,
                            const std::vector<HierarchicalLabel>& labels,
                            const ModelOutput* noise_output, const LossWeights& weights);

}  // namespace hpnet
