#include "hpnet/objective.hpp"

#include <cmath>
#include <stdexcept>

#include "hpnet/inference.hpp"

namespace hpnet {

void LossWeights::validate() const {
  for (double v : {clust, sep, reg}) {
    if (!std::isfinite(v) || v < 0.0) throw std::invalid_argument("loss weights must be finite and >= 0");
  }
}

double LossBreakdown::cross_entropy() const {
  double s = 0.0;
  for (const auto& p : parents) s += p.cross_entropy;
  return s;
}
double LossBreakdown::clust() const {
  double s = 0.0;
  for (const auto& p : parents) s += p.clust;
  return s;
}
double LossBreakdown::sep() const {
  double s = 0.0;
  for (const auto& p : parents) s += p.sep;
  return s;
}
double LossBreakdown::reg() const {
  double s = 0.0;
  for (const auto& p : parents) s += p.reg;
  return s;
}
double LossBreakdown::weighted_total(const LossWeights& w) const {
  return cross_entropy() + w.clust * clust() + w.sep * sep() + w.reg * reg() + ceda;
}

LabelPaths resolve_labels(const Taxonomy& taxonomy, const std::vector<HierarchicalLabel>& labels) {
  LabelPaths out;
  out.reserve(labels.size());
  for (const auto& l : labels) out.push_back(resolve_label(taxonomy, l));
  return out;
}

std::vector<std::size_t> child_targets(const PrototypeLayer& layer, const LabelPaths& paths) {
  std::vector<std::size_t> out(paths.size(), kNoIndex);
  for (std::size_t n = 0; n < paths.size(); ++n) {
    for (std::size_t c = 0; c < layer.children.size(); ++c) {
      for (std::size_t node : paths[n]) {
        if (node == layer.children[c]) out[n] = c;
      }
    }
  }
  return out;
}

Tensor layer_cross_entropy(const PrototypeLayer& layer, const Tensor& logits, const LabelPaths& paths) {
  return scale(sum(pick(log_softmax(logits), child_targets(layer, paths))), -1.0);
}

Tensor hierarchical_cross_entropy(const HpnetModel& model, const ModelOutput& output,
                                  const std::vector<HierarchicalLabel>& labels) {
  const LabelPaths paths = resolve_labels(model.taxonomy(), labels);
  Tensor total;
  for (std::size_t i = 0; i < model.layers().size(); ++i) {
    Tensor ce = layer_cross_entropy(model.layers()[i], output.layers[i].logits, paths);
    total = total.defined() ? add(total, ce) : ce;
  }
  return total;
}

namespace {

std::vector<std::vector<std::size_t>> allowed_prototypes(const PrototypeLayer& layer, const LabelPaths& paths,
                                                         bool own) {
  const auto targets = child_targets(layer, paths);
  std::vector<std::vector<std::size_t>> allowed(paths.size());
  for (std::size_t n = 0; n < paths.size(); ++n) {
    if (targets[n] == kNoIndex) continue;
    for (std::size_t j = 0; j < layer.allocation.size(); ++j) {
      if ((layer.allocation[j] == targets[n]) == own) allowed[n].push_back(j);
    }
  }
  return allowed;
}

}  // namespace

Tensor clustering_cost(const PrototypeLayer& layer, const Tensor& distances, const LabelPaths& paths) {
  return sum(min_over_allowed(distances, allowed_prototypes(layer, paths, true)));
}

Tensor separation_cost(const PrototypeLayer& layer, const Tensor& distances, const LabelPaths& paths) {
  return scale(sum(min_over_allowed(distances, allowed_prototypes(layer, paths, false))), -1.0);
}

Tensor fc_regularization(const PrototypeLayer& layer) {
  return mixed_l2_l1(layer.fc_weights, layer.own_mask());
}

Tensor ceda_loss(const HpnetModel& model, const ModelOutput& noise_output) {
  const Tensor joint = joint_log_distribution(model, noise_output);
  const double leaves = static_cast<double>(joint.dim(1));
  return scale(sum(joint), -1.0 / leaves);
}

Objective compute_objective(const HpnetModel& model, const ModelOutput& output,
                            const std::vector<HierarchicalLabel>& labels, const ModelOutput* noise_output,
                            const LossWeights& weights) {
  const LabelPaths paths = resolve_labels(model.taxonomy(), labels);
  Objective obj;
  Tensor total;
  auto accumulate = [&total](const Tensor& t) { total = total.defined() ? add(total, t) : t; };
  for (std::size_t i = 0; i < model.layers().size(); ++i) {
    const PrototypeLayer& layer = model.layers()[i];
    const Tensor ce = layer_cross_entropy(layer, output.layers[i].logits, paths);
    const Tensor cl = clustering_cost(layer, output.layers[i].similarity.distances, paths);
    const Tensor sp = separation_cost(layer, output.layers[i].similarity.distances, paths);
    const Tensor rg = fc_regularization(layer);
    accumulate(ce);
    if (weights.clust != 0.0) accumulate(scale(cl, weights.clust));
    if (weights.sep != 0.0) accumulate(scale(sp, weights.sep));
    if (weights.reg != 0.0) accumulate(scale(rg, weights.reg));
    obj.breakdown.parents.push_back(
        {model.taxonomy().name(layer.parent), ce.item(), cl.item(), sp.item(), rg.item()});
  }
  if (noise_output) {
    const Tensor cd = ceda_loss(model, *noise_output);
    accumulate(cd);
    obj.breakdown.ceda = cd.item();
  }
  obj.total = total;
  obj.breakdown.total = total.item();
  return obj;
}

}  // namespace hpnet
