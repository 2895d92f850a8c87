#include "hpnet/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace hpnet {

std::vector<LeafPath> leaf_paths(const HpnetModel& model) {
  const Taxonomy& t = model.taxonomy();
  std::vector<LeafPath> out;
  for (std::size_t leaf : t.leaves()) {
    LeafPath lp{leaf, {}};
    for (std::size_t node : t.path_to(leaf)) {
      const std::size_t parent = t.node(node).parent;
      lp.steps.emplace_back(model.layer_index(parent), t.child_index(parent, node));
    }
    out.push_back(std::move(lp));
  }
  return out;
}

Tensor joint_log_distribution(const HpnetModel& model, const ModelOutput& output) {
  std::vector<Tensor> logp;
  for (const auto& layer : output.layers) logp.push_back(log_softmax(layer.logits));
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> paths;
  for (auto& lp : leaf_paths(model)) paths.push_back(std::move(lp.steps));
  return path_sum(logp, paths);
}

namespace {

std::vector<double> softmax_row(const double* logits, std::size_t n) {
  const double mx = *std::max_element(logits, logits + n);
  std::vector<double> p(n);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += (p[i] = std::exp(logits[i] - mx));
  for (double& v : p) v /= s;
  return p;
}

std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

std::vector<HierPrediction> predict(const HpnetModel& model, const Tensor& batch) {
  NoGradGuard guard;
  const ModelOutput out = forward(model, batch);
  const Tensor joint = joint_log_distribution(model, out);
  const Taxonomy& t = model.taxonomy();
  const auto leaves = t.leaves();
  const std::size_t n = batch.dim(0);
  std::vector<HierPrediction> preds(n);
  for (std::size_t b = 0; b < n; ++b) {
    HierPrediction& p = preds[b];
    for (std::size_t li = 0; li < model.layers().size(); ++li) {
      const Tensor& logits = out.layers[li].logits;
      const std::size_t c = logits.dim(1);
      p.conditionals.push_back(softmax_row(logits.data().data() + b * c, c));
      const Tensor& scores = out.layers[li].similarity.scores;
      const std::size_t m = scores.dim(1);
      std::size_t best = 0;
      for (std::size_t j = 1; j < m; ++j)
        if (scores[b * m + j] > scores[b * m + best]) best = j;
      p.top_activations.push_back({best, scores[b * m + best], out.layers[li].similarity.argmax[b * m + best]});
    }
    p.joint.resize(leaves.size());
    for (std::size_t l = 0; l < leaves.size(); ++l) p.joint[l] = std::exp(joint[b * leaves.size() + l]);
    p.joint_argmax_leaf = leaves[argmax(p.joint)];
    std::size_t node = t.root();
    while (!t.is_leaf(node)) {
      const std::size_t li = model.layer_index(node);
      node = t.node(node).children[argmax(p.conditionals[li])];
      p.predicted_path.push_back(node);
    }
  }
  return preds;
}

std::vector<HierPrediction> predict(const HpnetModel& model, const LabeledDataset& dataset,
                                    std::size_t batch_size) {
  std::vector<HierPrediction> out;
  for (std::size_t begin = 0; begin < dataset.size(); begin += batch_size) {
    const std::size_t end = std::min(dataset.size(), begin + batch_size);
    auto part = predict(model, dataset.batch(begin, end));
    std::move(part.begin(), part.end(), std::back_inserter(out));
  }
  return out;
}

std::vector<double> joint_fine_distribution(const HpnetModel& model, const Tensor& image) {
  Tensor batch = image;
  if (image.rank() == 3) {
    batch = Tensor({1, image.dim(0), image.dim(1), image.dim(2)}, image.values());
  }
  return predict(model, batch).front().joint;
}

std::size_t CoarseDistribution::argmax() const { return hpnet::argmax(probabilities); }

CoarseDistribution coarse_from_flat(const std::vector<double>& fine, const Taxonomy& taxonomy,
                                    std::size_t level) {
  const auto leaves = taxonomy.leaves();
  if (fine.size() != leaves.size()) {
    throw std::invalid_argument("coarse_from_flat: expected " + std::to_string(leaves.size()) +
                                " fine probabilities, got " + std::to_string(fine.size()));
  }
  CoarseDistribution out;
  for (std::size_t i = 0; i < taxonomy.size(); ++i) {
    const auto& node = taxonomy.node(i);
    if (node.depth == level || (node.depth < level && node.depth > 0 && taxonomy.is_leaf(i))) {
      out.nodes.push_back(i);
    }
  }
  out.probabilities.assign(out.nodes.size(), 0.0);
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    const std::size_t leaf = leaves[l];
    const std::size_t rep = taxonomy.node(leaf).depth >= level ? taxonomy.ancestor_at(leaf, level) : leaf;
    const auto it = std::find(out.nodes.begin(), out.nodes.end(), rep);
    out.probabilities[static_cast<std::size_t>(it - out.nodes.begin())] += fine[l];
  }
  return out;
}

CoarseDistribution coarse_from_flat(const std::vector<std::pair<std::string, double>>& fine,
                                    const Taxonomy& taxonomy, std::size_t level) {
  const auto leaves = taxonomy.leaves();
  std::vector<double> ordered(leaves.size(), 0.0);
  for (const auto& [name, p] : fine) {
    const auto node = taxonomy.find(name);
    if (!node || !taxonomy.is_leaf(*node)) {
      throw std::invalid_argument("coarse_from_flat: '" + name + "' is not a taxonomy leaf");
    }
    ordered[static_cast<std::size_t>(std::find(leaves.begin(), leaves.end(), *node) - leaves.begin())] += p;
  }
  return coarse_from_flat(ordered, taxonomy, level);
}

namespace {

// Joint distribution re-expressed over the leaves of eval_taxonomy.
std::vector<double> joint_over(const HpnetModel& model, const HierPrediction& p, const Taxonomy& eval) {
  if (&eval == &model.taxonomy()) return p.joint;
  const auto model_leaves = model.taxonomy().leaves();
  std::vector<std::pair<std::string, double>> named;
  for (std::size_t l = 0; l < model_leaves.size(); ++l) named.emplace_back(model.taxonomy().name(model_leaves[l]), p.joint[l]);
  const auto eval_leaves = eval.leaves();
  std::vector<double> out(eval_leaves.size(), 0.0);
  for (const auto& [name, prob] : named) {
    const auto node = eval.find(name);
    if (!node || !eval.is_leaf(*node)) throw std::invalid_argument("evaluation taxonomy lacks leaf " + name);
    out[static_cast<std::size_t>(std::find(eval_leaves.begin(), eval_leaves.end(), *node) - eval_leaves.begin())] = prob;
  }
  return out;
}

double coarse_accuracy(const HpnetModel& model, const LabeledDataset& ds, const Taxonomy& eval) {
  const auto preds = predict(model, ds);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const CoarseDistribution coarse = coarse_from_flat(joint_over(model, preds[i], eval), eval, 1);
    if (eval.name(coarse.nodes[coarse.argmax()]) == ds.items[i].label.path.front()) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

}  // namespace

double fine_accuracy(const HpnetModel& model, const LabeledDataset& labeled) {
  if (labeled.empty()) throw std::invalid_argument("fine_accuracy: empty dataset");
  const auto preds = predict(model, labeled);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    if (model.taxonomy().name(preds[i].joint_argmax_leaf) == labeled.items[i].label.path.back()) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labeled.size());
}

AccuracyReport accuracy_suite(const HpnetModel& model, const LabeledDataset& labeled, const LabeledDataset& novel,
                              const Taxonomy* eval_taxonomy) {
  if (labeled.empty()) throw std::invalid_argument("accuracy_suite: empty in-distribution dataset");
  const Taxonomy& eval = eval_taxonomy ? *eval_taxonomy : model.taxonomy();
  AccuracyReport r;
  r.n_id = labeled.size();
  r.n_novel = novel.size();
  r.f_id = fine_accuracy(model, labeled);
  r.c_id = coarse_accuracy(model, labeled, eval);
  if (!novel.empty()) r.c_novel = coarse_accuracy(model, novel, eval);
  return r;
}

std::pair<double, GridPos> nearest_patch(const double* latent, std::size_t depth, std::size_t height,
                                         std::size_t width, const double* prototype) {
  const std::size_t hw = height * width;
  double best = std::numeric_limits<double>::infinity();
  std::size_t best_s = 0;
  for (std::size_t s = 0; s < hw; ++s) {
    double d = 0.0;
    for (std::size_t k = 0; k < depth; ++k) {
      const double diff = latent[k * hw + s] - prototype[k];
      d += diff * diff;
    }
    if (d < best) {
      best = d;
      best_s = s;
    }
  }
  return {best, GridPos{best_s / width, best_s % width}};
}

std::vector<std::vector<double>> dataset_latents(const HpnetModel& model, const LabeledDataset& dataset,
                                                 std::size_t batch_size) {
  NoGradGuard guard;
  std::vector<std::vector<double>> out;
  out.reserve(dataset.size());
  for (std::size_t begin = 0; begin < dataset.size(); begin += batch_size) {
    const std::size_t end = std::min(dataset.size(), begin + batch_size);
    const Tensor z = forward_latent(model, dataset.batch(begin, end));
    const std::size_t per = z.numel() / z.dim(0);
    for (std::size_t b = 0; b < z.dim(0); ++b) {
      out.emplace_back(z.data().begin() + static_cast<long>(b * per), z.data().begin() + static_cast<long>((b + 1) * per));
    }
  }
  return out;
}

ClusteringQuality clustering_quality(const std::vector<PrototypeLayer>& layers, const Taxonomy& taxonomy,
                                     const std::vector<std::vector<double>>& latents, std::size_t depth,
                                     std::size_t height, std::size_t width,
                                     const std::vector<HierarchicalLabel>& labels, std::size_t k) {
  if (latents.size() != labels.size()) throw std::invalid_argument("clustering_quality: latents/labels size mismatch");
  if (latents.empty()) throw std::invalid_argument("clustering_quality: empty dataset");
  ClusteringQuality q;
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& layer : layers) {
    std::vector<double> fractions;
    for (std::size_t j = 0; j < layer.num_prototypes(); ++j) {
      const double* proto = layer.prototypes.data().data() + j * depth;
      std::vector<std::pair<double, std::size_t>> ranked;
      for (std::size_t i = 0; i < latents.size(); ++i) {
        ranked.emplace_back(nearest_patch(latents[i].data(), depth, height, width, proto).first, i);
      }
      const std::size_t take = std::min(k, ranked.size());
      std::partial_sort(ranked.begin(), ranked.begin() + static_cast<long>(take), ranked.end());
      const std::string& own = taxonomy.name(layer.children[layer.allocation[j]]);
      std::size_t correct = 0;
      for (std::size_t r = 0; r < take; ++r) {
        const auto& path = labels[ranked[r].second].path;
        if (std::find(path.begin(), path.end(), own) != path.end()) ++correct;
      }
      const double frac = static_cast<double>(correct) / static_cast<double>(take);
      fractions.push_back(frac);
      total += frac;
      ++count;
    }
    q.per_prototype.push_back(std::move(fractions));
  }
  q.percentage = 100.0 * total / static_cast<double>(count);
  return q;
}

ClusteringQuality clustering_quality(const HpnetModel& model, const LabeledDataset& dataset, std::size_t k) {
  // Image order decides distance ties, so present images sorted by id.
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dataset.items[a].id < dataset.items[b].id; });
  auto unsorted = dataset_latents(model, dataset);
  std::vector<std::vector<double>> latents;
  std::vector<HierarchicalLabel> labels;
  for (std::size_t i : order) {
    latents.push_back(std::move(unsorted[i]));
    labels.push_back(dataset.items[i].label);
  }
  const std::size_t s = model.config().backbone.latent_size();
  return clustering_quality(model.layers(), model.taxonomy(), latents, model.config().backbone.adapter_channels,
                            s, s, labels, k);
}

std::string metrics_text(const AccuracyReport& acc, const ClusteringQuality* quality) {
  std::ostringstream os;
  os.precision(17);
  os << "f_id=" << acc.f_id << "\n"
     << "c_id=" << acc.c_id << "\n"
     << "c_novel=" << acc.c_novel << "\n"
     << "n_id=" << acc.n_id << "\n"
     << "n_novel=" << acc.n_novel << "\n";
  if (quality) os << "clustering_quality=" << quality->percentage << "\n";
  return os.str();
}

std::string metrics_json(const AccuracyReport& acc, const ClusteringQuality* quality) {
  nlohmann::ordered_json doc{{"f_id", acc.f_id},   {"c_id", acc.c_id},       {"c_novel", acc.c_novel},
                             {"n_id", acc.n_id},   {"n_novel", acc.n_novel}};
  if (quality) doc["clustering_quality"] = quality->percentage;
  return doc.dump(2);
}

}  // namespace hpnet
