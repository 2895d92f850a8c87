#include "hpnet/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "hpnet/inference.hpp"

namespace hpnet {

void init_fc(PrototypeLayer& layer) {
  const std::size_t m = layer.num_prototypes();
  auto w = layer.fc_weights.data();
  for (std::size_t c = 0; c < layer.num_children(); ++c)
    for (std::size_t j = 0; j < m; ++j) w[c * m + j] = layer.allocation[j] == c ? 1.0 : -0.5;
}

void TrainSchedule::validate() const {
  if (epochs_conv == 0 || epochs_convex == 0 || epochs_convex_final == 0 || projection_period == 0) {
    throw std::invalid_argument("schedule: conv epochs, convex epochs and projection period must be positive");
  }
}

std::vector<std::size_t> TrainSchedule::projection_epochs() const {
  std::vector<std::size_t> out;
  const std::size_t total = total_epochs();
  for (std::size_t e = projection_period; e <= total; e += projection_period) out.push_back(e);
  if (out.empty() || out.back() != total) out.push_back(total);
  return out;
}

const char* phase_name(Phase phase) {
  switch (phase) {
    case Phase::conv: return "conv";
    case Phase::all: return "all";
    case Phase::convex: return "convex";
  }
  return "?";
}

void TrainConfig::validate() const {
  schedule.validate();
  weights.validate();
  for (double lr : {lr_conv, lr_all, lr_convex}) {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw std::invalid_argument("learning rates must be positive");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("momentum must lie in [0,1)");
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
}

std::string ProjectionReport::to_json() const {
  nlohmann::ordered_json doc{{"epoch", epoch}, {"prototypes", nlohmann::ordered_json::array()}};
  for (const auto& r : records) {
    doc["prototypes"].push_back({{"parent", r.parent},
                                 {"prototype", r.prototype},
                                 {"class", r.child},
                                 {"image_id", r.image_id},
                                 {"row", r.position.row},
                                 {"col", r.position.col},
                                 {"distance", r.distance}});
  }
  return doc.dump(2);
}

const char* EpochLog::header() {
  return "epoch,phase,loss_total,loss_ce,loss_clust,loss_sep,loss_reg,loss_ceda,val_fine_acc";
}

std::string EpochLog::to_line() const {
  auto num = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return std::string(buf);
  };
  auto opt = [&num](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
  std::ostringstream os;
  os << epoch << ',' << phase_name(phase) << ',' << num(total) << ',' << num(ce) << ',' << opt(clust) << ','
     << opt(sep) << ',' << num(reg) << ',' << opt(ceda) << ',' << opt(val_fine_acc);
  return os.str();
}

Trainer::Trainer(HpnetModel& model, const LabeledDataset& train, const LabeledDataset& val, TrainConfig config)
    : model_(model),
      train_(train),
      val_(val),
      config_(std::move(config)),
      rng_(config_.seed),
      opt_conv_(config_.lr_conv, config_.momentum),
      opt_all_(config_.lr_all, config_.momentum) {
  config_.validate();
  if (train_.empty()) throw std::invalid_argument("training set is empty");
  validate_dataset(train_, model_.taxonomy());
  if (!val_.empty()) validate_dataset(val_, model_.taxonomy());
  std::vector<HierarchicalLabel> labels;
  for (const auto& item : train_.items) labels.push_back(item.label);
  train_paths_ = resolve_labels(model_.taxonomy(), labels);
  state_.seed = config_.seed;
  for (const auto& [name, tensor] : model_.named_parameters()) {
    opt_conv_.add_parameter(name, tensor);
    opt_all_.add_parameter(name, tensor);
    const bool is_fc = name.size() > 3 && name.compare(name.size() - 3, 3, ".fc") == 0;
    if (is_fc) opt_conv_.set_frozen(name, true);
  }
}

EpochLog Trainer::run_epoch(Phase phase, SgdOptimizer& opt) {
  state_.phase = phase;
  const std::size_t n = train_.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  rng_.shuffle(order);

  const std::size_t size = model_.config().backbone.input_size;
  double ce = 0.0, clust = 0.0, sep = 0.0, reg = 0.0, ceda = 0.0;
  std::size_t batches = 0;
  for (std::size_t begin = 0; begin < n; begin += config_.batch_size) {
    const std::size_t end = std::min(n, begin + config_.batch_size);
    std::vector<std::size_t> idx(order.begin() + static_cast<long>(begin), order.begin() + static_cast<long>(end));
    Tensor batch;
    if (config_.augment) {
      LabeledDataset tmp;
      for (std::size_t i : idx) {
        tmp.items.push_back({train_.items[i].id, augment_crop(train_.items[i].image, CropMode::train, size, rng_),
                             train_.items[i].label});
      }
      batch = tmp.batch(0, tmp.size());
    } else {
      batch = train_.batch(idx);
    }
    std::vector<HierarchicalLabel> labels;
    for (std::size_t i : idx) labels.push_back(train_.items[i].label);

    const ModelOutput out = forward(model_, batch);
    std::optional<ModelOutput> noise_out;
    if (config_.ceda) noise_out = forward(model_, noise_batch(batch.shape(), rng_));
    const Objective obj = compute_objective(model_, out, labels, noise_out ? &*noise_out : nullptr, config_.weights);
    if (!std::isfinite(obj.breakdown.total)) {
      const auto& b = obj.breakdown;
      std::ostringstream os;
      os << "non-finite loss at epoch " << state_.epoch << " (" << phase_name(phase) << "): ce=" << b.cross_entropy()
         << " clust=" << b.clust() << " sep=" << b.sep() << " reg=" << b.reg() << " ceda=" << b.ceda;
      throw NumericError(os.str());
    }
    opt.zero_grad();
    backward(obj.total);
    opt.step();

    ce += obj.breakdown.cross_entropy();
    clust += obj.breakdown.clust();
    sep += obj.breakdown.sep();
    reg += obj.breakdown.reg();
    ceda += obj.breakdown.ceda;
    ++batches;
  }
  const double dn = static_cast<double>(n);
  EpochLog log;
  log.epoch = state_.epoch;
  log.phase = phase;
  log.ce = ce / dn;
  log.clust = clust / dn;
  log.sep = sep / dn;
  log.reg = reg / static_cast<double>(batches);
  if (config_.ceda) log.ceda = ceda / dn;
  const LossWeights& w = config_.weights;
  log.total = log.ce + w.clust * *log.clust + w.sep * *log.sep + log.ceda.value_or(0.0) + w.reg * log.reg / dn;
  return log;
}

EpochLog Trainer::run_phase_conv() { return run_epoch(Phase::conv, opt_conv_); }
EpochLog Trainer::run_phase_all() { return run_epoch(Phase::all, opt_all_); }

std::vector<std::size_t> Trainer::ids_order() const {
  std::vector<std::size_t> order(train_.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [this](std::size_t a, std::size_t b) { return train_.items[a].id < train_.items[b].id; });
  return order;
}

ProjectionReport Trainer::project_prototypes() {
  const auto latents = dataset_latents(model_, train_);
  const std::size_t depth = model_.config().backbone.adapter_channels;
  const std::size_t side = model_.config().backbone.latent_size();
  const std::size_t hw = side * side;
  const auto order = ids_order();
  const Taxonomy& t = model_.taxonomy();

  ProjectionReport report;
  report.epoch = state_.epoch;
  for (PrototypeLayer& layer : model_.layers()) {
    auto protos = layer.prototypes.data();
    for (std::size_t j = 0; j < layer.num_prototypes(); ++j) {
      const std::size_t child = layer.children[layer.allocation[j]];
      double* p = protos.data() + j * depth;
      bool found = false;
      ProjectionRecord rec;
      for (std::size_t i : order) {
        const auto& path = train_paths_[i];
        if (std::find(path.begin(), path.end(), child) == path.end()) continue;
        const auto [d, pos] = nearest_patch(latents[i].data(), depth, side, side, p);
        if (!found || d < rec.distance) {
          found = true;
          rec.distance = d;
          rec.position = pos;
          rec.image_index = i;
        }
      }
      if (!found) throw std::runtime_error("projection: class '" + t.name(child) + "' has no training images");
      rec.parent = t.name(layer.parent);
      rec.prototype = j;
      rec.child = t.name(child);
      rec.image_id = train_.items[rec.image_index].id;
      const double* z = latents[rec.image_index].data();
      const std::size_t s = rec.position.row * side + rec.position.col;
      for (std::size_t k = 0; k < depth; ++k) p[k] = z[k * hw + s];
      report.records.push_back(std::move(rec));
    }
  }
  model_.set_projected(true);
  return report;
}

namespace {

// Smooth part of the per-layer convex problem: summed cross entropy plus
// lambda3 times the squared own-class weights. Fills grad when non-null.
double convex_smooth(const std::vector<double>& w, const std::vector<double>& scores,
                     const std::vector<std::size_t>& targets, const std::vector<bool>& own, std::size_t classes,
                     std::size_t m, double lambda, std::vector<double>* grad) {
  if (grad) grad->assign(w.size(), 0.0);
  double f = 0.0;
  std::vector<double> logits(classes);
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == kNoIndex) continue;
    const double* s = scores.data() + i * m;
    for (std::size_t c = 0; c < classes; ++c) {
      double v = 0.0;
      for (std::size_t j = 0; j < m; ++j) v += w[c * m + j] * s[j];
      logits[c] = v;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double v : logits) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    f += lse - logits[targets[i]];
    if (grad) {
      for (std::size_t c = 0; c < classes; ++c) {
        const double g = std::exp(logits[c] - lse) - (c == targets[i] ? 1.0 : 0.0);
        for (std::size_t j = 0; j < m; ++j) (*grad)[c * m + j] += g * s[j];
      }
    }
  }
  for (std::size_t k = 0; k < w.size(); ++k) {
    if (!own[k]) continue;
    f += lambda * w[k] * w[k];
    if (grad) (*grad)[k] += 2.0 * lambda * w[k];
  }
  return f;
}

double l1_other(const std::vector<double>& w, const std::vector<bool>& own) {
  double s = 0.0;
  for (std::size_t k = 0; k < w.size(); ++k)
    if (!own[k]) s += std::abs(w[k]);
  return s;
}

}  // namespace

std::vector<EpochLog> Trainer::convex_optimize_fc(std::size_t epochs) {
  state_.phase = Phase::convex;
  const std::size_t n = train_.size();
  const std::size_t num_layers = model_.layers().size();
  std::vector<std::vector<double>> scores(num_layers);
  {
    NoGradGuard guard;
    for (std::size_t begin = 0; begin < n; begin += 32) {
      const ModelOutput out = forward(model_, train_.batch(begin, std::min(n, begin + 32)));
      for (std::size_t l = 0; l < num_layers; ++l) {
        const auto v = out.layers[l].similarity.scores.values();
        scores[l].insert(scores[l].end(), v.begin(), v.end());
      }
    }
  }
  const double lambda = config_.weights.reg;
  const std::size_t iters = (n + config_.batch_size - 1) / config_.batch_size;
  std::vector<double> step(num_layers, config_.lr_convex);
  double previous = std::numeric_limits<double>::infinity();
  std::vector<EpochLog> logs;

  for (std::size_t e = 0; e < epochs; ++e) {
    double ce_total = 0.0, reg_total = 0.0, objective = 0.0;
    for (std::size_t l = 0; l < num_layers; ++l) {
      PrototypeLayer& layer = model_.layers()[l];
      const std::size_t classes = layer.num_children(), m = layer.num_prototypes();
      const auto targets = child_targets(layer, train_paths_);
      const auto own = layer.own_mask();
      std::vector<double> w(layer.fc_weights.values());
      std::vector<double> grad, next(w.size());
      double t = step[l];
      for (std::size_t it = 0; it < iters; ++it) {
        const double f = convex_smooth(w, scores[l], targets, own, classes, m, lambda, &grad);
        for (int attempt = 0; attempt < 60; ++attempt) {
          for (std::size_t k = 0; k < w.size(); ++k) {
            const double v = w[k] - t * grad[k];
            next[k] = own[k] ? v : std::copysign(std::max(std::abs(v) - t * lambda, 0.0), v);
          }
          double lin = 0.0, quad = 0.0;
          for (std::size_t k = 0; k < w.size(); ++k) {
            const double d = next[k] - w[k];
            lin += grad[k] * d;
            quad += d * d;
          }
          const double fn = convex_smooth(next, scores[l], targets, own, classes, m, lambda, nullptr);
          if (fn <= f + lin + quad / (2.0 * t) + 1e-12 * std::abs(f)) break;
          t *= 0.5;
        }
        w.swap(next);
        t *= 1.25;
      }
      step[l] = t;
      std::copy(w.begin(), w.end(), layer.fc_weights.data().begin());
      const double smooth = convex_smooth(w, scores[l], targets, own, classes, m, lambda, nullptr);
      const double l1 = l1_other(w, own);
      double own_sq = 0.0;
      for (std::size_t k = 0; k < w.size(); ++k)
        if (own[k]) own_sq += w[k] * w[k];
      ce_total += smooth - lambda * own_sq;
      reg_total += own_sq + l1;
      objective += smooth + lambda * l1;
    }
    if (objective > previous + 1e-8 * std::max(1.0, std::abs(previous))) {
      throw std::logic_error("convex FC optimization increased the loss");
    }
    previous = objective;
    EpochLog log;
    log.epoch = state_.epoch;
    log.phase = Phase::convex;
    log.ce = ce_total / static_cast<double>(n);
    log.reg = reg_total;
    log.total = objective / static_cast<double>(n);
    logs.push_back(log);
  }
  return logs;
}

TrainResult Trainer::train() {
  const auto cycles = config_.schedule.projection_epochs();
  const std::size_t total = config_.schedule.total_epochs();
  TrainResult result;
  auto emit = [&](const EpochLog& log) {
    result.log.push_back(log);
    if (on_log) on_log(log);
  };
  for (std::size_t e = 1; e <= total; ++e) {
    state_.epoch = e;
    emit(e <= config_.schedule.epochs_conv ? run_phase_conv() : run_phase_all());
    if (std::find(cycles.begin(), cycles.end(), e) == cycles.end()) continue;

    ProjectionReport report = project_prototypes();
    if (on_projection) on_projection(model_, report);
    result.projections.push_back(std::move(report));
    auto logs = convex_optimize_fc(e == total ? config_.schedule.epochs_convex_final : config_.schedule.epochs_convex);
    const double val = fine_accuracy(model_, val_.empty() ? train_ : val_);
    logs.back().val_fine_acc = val;
    for (const auto& log : logs) emit(log);

    if (val > state_.best_val) {
      state_.best_val = val;
      state_.since_improvement = 0;
      result.best = model_.clone();
      result.best_epoch = e;
      result.best_val = val;
    } else {
      ++state_.since_improvement;
    }
    if (config_.patience > 0 && state_.since_improvement >= config_.patience && e != total) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

LossBreakdown dataset_objective(const HpnetModel& model, const LabeledDataset& data, const LossWeights& weights,
                                std::size_t batch_size) {
  if (data.empty()) throw std::invalid_argument("dataset_objective: empty dataset");
  NoGradGuard guard;
  LossBreakdown acc;
  for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
    const std::size_t end = std::min(data.size(), begin + batch_size);
    std::vector<HierarchicalLabel> labels;
    for (std::size_t i = begin; i < end; ++i) labels.push_back(data.items[i].label);
    const Objective obj = compute_objective(model, forward(model, data.batch(begin, end)), labels, nullptr, weights);
    if (acc.parents.empty()) {
      acc.parents = obj.breakdown.parents;
      for (auto& p : acc.parents) p.cross_entropy = p.clust = p.sep = 0.0;
    }
    for (std::size_t l = 0; l < acc.parents.size(); ++l) {
      acc.parents[l].cross_entropy += obj.breakdown.parents[l].cross_entropy;
      acc.parents[l].clust += obj.breakdown.parents[l].clust;
      acc.parents[l].sep += obj.breakdown.parents[l].sep;
    }
  }
  const double n = static_cast<double>(data.size());
  for (auto& p : acc.parents) {
    p.cross_entropy /= n;
    p.clust /= n;
    p.sep /= n;
  }
  acc.total = acc.weighted_total(weights);
  return acc;
}

}  // namespace hpnet
