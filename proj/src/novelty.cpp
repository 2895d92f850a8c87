#include "hpnet/novelty.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "hpnet/hash.hpp"
#include "hpnet/inference.hpp"
#include "hpnet/rng.hpp"

namespace hpnet {

namespace {

double sigmoid(double s) {
  if (s >= 0) return 1.0 / (1.0 + std::exp(-s));
  const double e = std::exp(s);
  return e / (1.0 + e);
}

double softplus(double s) { return s > 0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s)); }

LogitFeature feature_row(const ModelOutput& out, std::size_t b, std::size_t parent_layer, std::size_t root_layer,
                         const FeatureOptions& options) {
  LogitFeature f;
  const Tensor& pl = out.layers[parent_layer].logits;
  const std::size_t pc = pl.dim(1);
  f.values.assign(pl.data().begin() + static_cast<long>(b * pc), pl.data().begin() + static_cast<long>((b + 1) * pc));
  f.child_dim = pc;
  if (options.include_root) {
    const Tensor& rl = out.layers[root_layer].logits;
    const std::size_t rc = rl.dim(1);
    f.values.insert(f.values.end(), rl.data().begin() + static_cast<long>(b * rc),
                    rl.data().begin() + static_cast<long>((b + 1) * rc));
  }
  return f;
}

std::vector<double> standardized(const NoveltyDetector& d, const LogitFeature& f) {
  if (f.values.size() != d.mean.size()) {
    throw DimensionError("novelty feature has " + std::to_string(f.values.size()) + " entries, detector expects " +
                         std::to_string(d.mean.size()));
  }
  std::vector<double> x(f.values.size());
  for (std::size_t k = 0; k < x.size(); ++k) x[k] = (f.values[k] - d.mean[k]) / d.scale[k];
  return x;
}

void fit_standardization(NoveltyDetector& d, const std::vector<LogitFeature>& train) {
  const std::size_t dim = train.front().values.size();
  d.mean.assign(dim, 0.0);
  d.scale.assign(dim, 0.0);
  for (const auto& f : train)
    for (std::size_t k = 0; k < dim; ++k) d.mean[k] += f.values[k];
  for (double& m : d.mean) m /= static_cast<double>(train.size());
  for (const auto& f : train)
    for (std::size_t k = 0; k < dim; ++k) d.scale[k] += (f.values[k] - d.mean[k]) * (f.values[k] - d.mean[k]);
  for (double& s : d.scale) {
    s = std::sqrt(s / static_cast<double>(train.size()));
    if (!(s > 1e-12)) s = 1.0;
  }
}

// Hinge loss + penalty * |w|^2 by full-batch subgradient descent; keeps the best iterate.
void fit_svm(NoveltyDetector& d, const std::vector<std::vector<double>>& x, const std::vector<double>& y,
             double penalty, std::size_t iterations) {
  const std::size_t n = x.size(), dim = x.front().size();
  std::vector<double> w(dim, 0.0), gw(dim);
  double b = 0.0;
  auto objective = [&](const std::vector<double>& wv, double bv) {
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = bv;
      for (std::size_t k = 0; k < dim; ++k) s += wv[k] * x[i][k];
      loss += std::max(0.0, 1.0 - y[i] * s);
    }
    double reg = 0.0;
    for (double v : wv) reg += v * v;
    return loss / static_cast<double>(n) + penalty * reg;
  };
  double best = objective(w, b);
  std::vector<double> best_w = w;
  double best_b = b;
  for (std::size_t t = 1; t <= iterations; ++t) {
    for (std::size_t k = 0; k < dim; ++k) gw[k] = 2.0 * penalty * w[k];
    double gb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = b;
      for (std::size_t k = 0; k < dim; ++k) s += w[k] * x[i][k];
      if (y[i] * s < 1.0) {
        for (std::size_t k = 0; k < dim; ++k) gw[k] -= y[i] * x[i][k] / static_cast<double>(n);
        gb -= y[i] / static_cast<double>(n);
      }
    }
    const double eta = 1.0 / std::sqrt(static_cast<double>(t));
    for (std::size_t k = 0; k < dim; ++k) w[k] -= eta * gw[k];
    b -= eta * gb;
    const double obj = objective(w, b);
    if (obj < best) {
      best = obj;
      best_w = w;
      best_b = b;
    }
  }
  d.weights = best_w;
  d.bias = best_b;
}

// Logistic loss + penalty * |w|^2 by damped Newton steps.
void fit_logistic(NoveltyDetector& d, const std::vector<std::vector<double>>& x, const std::vector<double>& y,
                  double penalty) {
  const std::size_t n = x.size(), dim = x.front().size();
  const auto p = static_cast<Eigen::Index>(dim + 1);
  Eigen::VectorXd theta = Eigen::VectorXd::Zero(p);
  auto loss = [&](const Eigen::VectorXd& th) {
    double l = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = th[static_cast<Eigen::Index>(dim)];
      for (std::size_t k = 0; k < dim; ++k) s += th[static_cast<Eigen::Index>(k)] * x[i][k];
      l += softplus(s) - y[i] * s;
    }
    return l / static_cast<double>(n) + penalty * th.head(p - 1).squaredNorm();
  };
  double current = loss(theta);
  for (int iter = 0; iter < 100; ++iter) {
    Eigen::VectorXd g = Eigen::VectorXd::Zero(p);
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(p, p);
    for (std::size_t i = 0; i < n; ++i) {
      Eigen::VectorXd xi(p);
      for (std::size_t k = 0; k < dim; ++k) xi[static_cast<Eigen::Index>(k)] = x[i][k];
      xi[p - 1] = 1.0;
      const double s = theta.dot(xi);
      const double sg = sigmoid(s);
      g += (sg - y[i]) * xi;
      h += sg * (1.0 - sg) * xi * xi.transpose();
    }
    g /= static_cast<double>(n);
    h /= static_cast<double>(n);
    for (Eigen::Index k = 0; k < p - 1; ++k) {
      g[k] += 2.0 * penalty * theta[k];
      h(k, k) += 2.0 * penalty;
    }
    h(p - 1, p - 1) += 1e-10;
    const Eigen::VectorXd step = h.ldlt().solve(g);
    double t = 1.0;
    bool moved = false;
    for (int ls = 0; ls < 40; ++ls) {
      const Eigen::VectorXd cand = theta - t * step;
      const double l = loss(cand);
      if (l <= current - 1e-4 * t * g.dot(step)) {
        theta = cand;
        moved = current - l > 1e-14;
        current = l;
        break;
      }
      t *= 0.5;
    }
    if (!moved) break;
  }
  d.weights.assign(theta.data(), theta.data() + dim);
  d.bias = theta[p - 1];
}

void check_classes(const std::vector<LogitFeature>& train) {
  const bool any_novel = std::any_of(train.begin(), train.end(), [](const LogitFeature& f) { return f.novel; });
  const bool any_familiar = std::any_of(train.begin(), train.end(), [](const LogitFeature& f) { return !f.novel; });
  if (!any_novel || !any_familiar) {
    throw std::invalid_argument("detector training set must contain both familiar and novel examples");
  }
}

double threshold_accuracy(const std::vector<LogitFeature>& features, double tau) {
  std::size_t correct = 0;
  for (const auto& f : features) correct += ((f.max_probability() < tau) == f.novel) ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(features.size());
}

}  // namespace

double LogitFeature::max_probability() const {
  if (child_dim == 0) throw std::invalid_argument("feature has no parent logits");
  const double mx = *std::max_element(values.begin(), values.begin() + static_cast<long>(child_dim));
  double z = 0.0;
  for (std::size_t k = 0; k < child_dim; ++k) z += std::exp(values[k] - mx);
  return 1.0 / z;
}

std::vector<LogitFeature> extract_features(const HpnetModel& model, const LabeledDataset& images,
                                           const std::string& parent, bool novel,
                                           const std::vector<std::size_t>& indices, const FeatureOptions& options) {
  const Taxonomy& t = model.taxonomy();
  const std::size_t parent_layer = model.layer_index(t.index_of(parent));
  const std::size_t root_layer = model.layer_index(t.root());
  std::vector<std::size_t> idx = indices;
  if (idx.empty()) {
    idx.resize(images.size());
    std::iota(idx.begin(), idx.end(), 0);
  }
  NoGradGuard guard;
  std::vector<LogitFeature> out;
  for (std::size_t begin = 0; begin < idx.size(); begin += 32) {
    const std::vector<std::size_t> part(idx.begin() + static_cast<long>(begin),
                                        idx.begin() + static_cast<long>(std::min(idx.size(), begin + 32)));
    const ModelOutput o = forward(model, images.batch(part));
    for (std::size_t b = 0; b < part.size(); ++b) {
      LogitFeature f = feature_row(o, b, parent_layer, root_layer, options);
      f.image_id = images.items[part[b]].id;
      f.novel = novel;
      out.push_back(std::move(f));
    }
  }
  return out;
}

const char* detector_name(DetectorKind kind) {
  switch (kind) {
    case DetectorKind::PbThreshold: return "PbThreshold";
    case DetectorKind::ScoreSVM: return "ScoreSVM";
    case DetectorKind::LogisticReg: return "LogisticReg";
  }
  return "?";
}

DetectorKind parse_detector(const std::string& name) {
  for (DetectorKind k : {DetectorKind::PbThreshold, DetectorKind::ScoreSVM, DetectorKind::LogisticReg}) {
    if (name == detector_name(k)) return k;
  }
  throw std::invalid_argument("unknown detector '" + name + "' (expected PbThreshold, ScoreSVM or LogisticReg)");
}

double NoveltyDetector::score(const LogitFeature& feature) const {
  if (kind == DetectorKind::PbThreshold) return threshold - feature.max_probability();
  const auto x = standardized(*this, feature);
  double s = bias;
  for (std::size_t k = 0; k < x.size(); ++k) s += weights[k] * x[k];
  return s;
}

Detection detect(const NoveltyDetector& detector, const LogitFeature& feature) {
  const double s = detector.score(feature);
  switch (detector.kind) {
    case DetectorKind::PbThreshold: return {s > 0.0, s > 0.0 ? 1.0 : 0.0};
    case DetectorKind::ScoreSVM: return {s > 0.0, sigmoid(s)};
    case DetectorKind::LogisticReg: {
      const double p = sigmoid(s);
      return {p > 0.5, p};
    }
  }
  return {};
}

double detector_accuracy(const NoveltyDetector& detector, const std::vector<LogitFeature>& features) {
  if (features.empty()) throw std::invalid_argument("detector_accuracy: no features");
  std::size_t correct = 0;
  for (const auto& f : features) correct += detect(detector, f).is_novel == f.novel ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(features.size());
}

NoveltyDetector fit_detector(DetectorKind kind, const std::string& parent, const std::vector<LogitFeature>& train,
                             const std::vector<LogitFeature>& holdout, const FitOptions& options) {
  check_classes(train);
  NoveltyDetector d;
  d.kind = kind;
  d.parent = parent;
  fit_standardization(d, train);

  if (kind == DetectorKind::PbThreshold) {
    auto candidates = [](const std::vector<LogitFeature>& fs) {
      std::vector<double> s;
      for (const auto& f : fs) s.push_back(f.max_probability());
      std::sort(s.begin(), s.end());
      s.erase(std::unique(s.begin(), s.end()), s.end());
      std::vector<double> mids;
      for (std::size_t i = 1; i < s.size(); ++i) mids.push_back(0.5 * (s[i - 1] + s[i]));
      return mids;
    };
    const auto& tuning = holdout.empty() ? train : holdout;
    auto mids = candidates(tuning);
    if (mids.empty()) mids = candidates(train);
    if (mids.empty()) mids.push_back(0.5);
    double best = -1.0;
    for (double tau : mids) {
      const double acc = threshold_accuracy(tuning, tau);
      if (acc > best) {
        best = acc;
        d.threshold = tau;
      }
    }
    return d;
  }

  auto design = [&d](const std::vector<LogitFeature>& fs, bool pm) {
    std::vector<std::vector<double>> x;
    std::vector<double> y;
    for (const auto& f : fs) {
      x.push_back(standardized(d, f));
      y.push_back(f.novel ? 1.0 : (pm ? -1.0 : 0.0));
    }
    return std::make_pair(x, y);
  };
  const bool svm = kind == DetectorKind::ScoreSVM;
  const auto [x, y] = design(train, svm);
  double best = -1.0;
  NoveltyDetector chosen = d;
  for (double penalty : options.penalties) {
    NoveltyDetector cand = d;
    cand.penalty = penalty;
    if (svm) {
      fit_svm(cand, x, y, penalty, options.svm_iterations);
    } else {
      fit_logistic(cand, x, y, penalty);
    }
    const double acc = detector_accuracy(cand, holdout.empty() ? train : holdout);
    if (acc > best) {
      best = acc;
      chosen = cand;
    }
  }
  return chosen;
}

double parent_probability(const HpnetModel& model, const Tensor& image, const std::string& parent) {
  const Taxonomy& t = model.taxonomy();
  const std::size_t node = t.index_of(parent);
  Tensor batch = image.rank() == 3 ? Tensor({1, image.dim(0), image.dim(1), image.dim(2)}, image.values()) : image;
  const auto pred = predict(model, batch).front();
  double p = 1.0;
  for (std::size_t n : t.path_to(node)) {
    const std::size_t up = t.node(n).parent;
    p *= pred.conditionals[model.layer_index(up)][t.child_index(up, n)];
  }
  return p;
}

double joint_novel_probability(const HpnetModel& model, const NoveltyDetector& detector, const Tensor& image,
                               const FeatureOptions& options) {
  const Taxonomy& t = model.taxonomy();
  Tensor batch = image.rank() == 3 ? Tensor({1, image.dim(0), image.dim(1), image.dim(2)}, image.values()) : image;
  LogitFeature f;
  {
    NoGradGuard guard;
    const ModelOutput o = forward(model, batch);
    f = feature_row(o, 0, model.layer_index(t.index_of(detector.parent)), model.layer_index(t.root()), options);
  }
  const double p_parent = parent_probability(model, batch, detector.parent);
  if (p_parent == 0.0) return 0.0;
  return detect(detector, f).p_novel * p_parent;
}

NoveltyPlacement novelty_placement(const Taxonomy& taxonomy, const HierarchicalLabel& label) {
  std::size_t current = taxonomy.root();
  for (const auto& name : label.path) {
    const auto node = taxonomy.find(name);
    if (node && taxonomy.node(*node).parent == current) {
      current = *node;
      continue;
    }
    return {current, name, true};
  }
  return {};
}

namespace {

struct ParentPools {
  std::vector<std::size_t> familiar;
  std::map<std::string, std::vector<std::size_t>> novel;  // novel class -> item indices
};

std::map<std::size_t, ParentPools> pools_by_parent(const HpnetModel& model, const LabeledDataset& familiar,
                                                   const LabeledDataset& novel) {
  const Taxonomy& t = model.taxonomy();
  std::map<std::size_t, ParentPools> pools;
  for (std::size_t p : t.parents()) pools[p];
  for (std::size_t i = 0; i < familiar.size(); ++i) {
    const auto path = resolve_label(t, familiar.items[i].label);
    pools[t.root()].familiar.push_back(i);
    for (std::size_t n : path)
      if (!t.is_leaf(n)) pools[n].familiar.push_back(i);
  }
  for (std::size_t i = 0; i < novel.size(); ++i) {
    const auto place = novelty_placement(t, novel.items[i].label);
    if (!place.valid) {
      throw std::invalid_argument("novel item " + novel.items[i].id + " has a label inside the taxonomy");
    }
    pools[place.parent].novel[place.novel_class].push_back(i);
  }
  return pools;
}

std::vector<std::size_t> take(std::vector<std::size_t> v, std::size_t n, Rng& rng) {
  rng.shuffle(v);
  v.resize(std::min(n, v.size()));
  return v;
}

}  // namespace

LocoReport loco_evaluate(const HpnetModel& model, DetectorKind kind, const LabeledDataset& familiar_train,
                         const LabeledDataset& familiar_test, const LabeledDataset& novel,
                         const LocoOptions& options) {
  const Taxonomy& t = model.taxonomy();
  LocoReport report;
  report.kind = kind;
  const auto pools = pools_by_parent(model, familiar_train, novel);
  const auto test_pools = pools_by_parent(model, familiar_test, novel);
  for (std::size_t parent : t.parents()) {
    const ParentPools& pool = pools.at(parent);
    const std::string& pname = t.name(parent);
    if (pool.novel.size() < 2) {
      report.warnings.push_back("parent '" + pname + "' skipped: " + std::to_string(pool.novel.size()) +
                                " novel class(es), need at least 2");
      continue;
    }
    Rng rng(options.seed ^ fnv1a(pname));
    const std::vector<std::size_t>& fam_fit = pool.familiar;
    const std::vector<std::size_t>& fam_test = test_pools.at(parent).familiar;

    LocoParent lp;
    lp.parent = pname;
    for (const auto& [test_class, test_items] : pool.novel) {
      Rng fold_rng = rng.fork(fnv1a(test_class));
      std::vector<std::size_t> train_novel;
      for (const auto& [cls, items] : pool.novel)
        if (cls != test_class) train_novel.insert(train_novel.end(), items.begin(), items.end());

      const std::size_t n_train = std::min(fam_fit.size(), train_novel.size());
      const auto fit_f = take(fam_fit, n_train, fold_rng);
      const auto fit_n = take(train_novel, n_train, fold_rng);
      const std::size_t n_hold = std::min(options.holdout / 2, n_train / 2);
      const std::size_t n_test = std::min(fam_test.size(), test_items.size());
      const auto test_f = take(fam_test, n_test, fold_rng);
      const auto test_n = take(test_items, n_test, fold_rng);
      if (n_train - n_hold == 0 || n_test == 0) {
        report.warnings.push_back("parent '" + pname + "' fold '" + test_class + "' skipped: too few images");
        continue;
      }

      auto features = [&](const LabeledDataset& familiar, const std::vector<std::size_t>& f_idx,
                          const std::vector<std::size_t>& n_idx) {
        auto out = extract_features(model, familiar, pname, false, f_idx, options.features);
        auto nov = extract_features(model, novel, pname, true, n_idx, options.features);
        out.insert(out.end(), nov.begin(), nov.end());
        return out;
      };
      const std::vector<std::size_t> hold_f(fit_f.begin(), fit_f.begin() + static_cast<long>(n_hold));
      const std::vector<std::size_t> hold_n(fit_n.begin(), fit_n.begin() + static_cast<long>(n_hold));
      const std::vector<std::size_t> tr_f(fit_f.begin() + static_cast<long>(n_hold), fit_f.end());
      const std::vector<std::size_t> tr_n(fit_n.begin() + static_cast<long>(n_hold), fit_n.end());
      const auto train_feats = features(familiar_train, tr_f, tr_n);
      const auto hold_feats = n_hold > 0 ? features(familiar_train, hold_f, hold_n) : std::vector<LogitFeature>{};
      const auto test_feats = features(familiar_test, test_f, test_n);

      const NoveltyDetector det = fit_detector(kind, pname, train_feats, hold_feats, options.fit);
      lp.folds.push_back({test_class, detector_accuracy(det, test_feats), tr_f.size(), n_hold, n_test});
    }
    if (lp.folds.empty()) continue;
    double s = 0.0;
    for (const auto& f : lp.folds) s += f.accuracy;
    lp.accuracy = s / static_cast<double>(lp.folds.size());
    report.parents.push_back(std::move(lp));
  }
  if (report.parents.empty()) {
    report.warnings.push_back("no parent had enough novel classes for evaluation");
  } else {
    double s = 0.0;
    for (const auto& p : report.parents) s += p.accuracy;
    report.overall = s / static_cast<double>(report.parents.size());
  }
  return report;
}

std::vector<NoveltyDetector> fit_parent_detectors(const HpnetModel& model, DetectorKind kind,
                                                  const LabeledDataset& familiar, const LabeledDataset& novel,
                                                  const LocoOptions& options) {
  const Taxonomy& t = model.taxonomy();
  const auto pools = pools_by_parent(model, familiar, novel);
  std::vector<NoveltyDetector> out;
  for (std::size_t parent : t.parents()) {
    const ParentPools& pool = pools.at(parent);
    if (pool.novel.empty() || pool.familiar.empty()) continue;
    const std::string& pname = t.name(parent);
    Rng rng(options.seed ^ fnv1a(pname));
    std::vector<std::size_t> all_novel;
    for (const auto& [cls, items] : pool.novel) all_novel.insert(all_novel.end(), items.begin(), items.end());
    const std::size_t n = std::min(pool.familiar.size(), all_novel.size());
    const auto f = take(pool.familiar, n, rng);
    const auto v = take(all_novel, n, rng);
    const std::size_t n_hold = std::min(options.holdout / 2, n / 2);
    auto features = [&](std::size_t b, std::size_t e) {
      auto fs = extract_features(model, familiar, pname, false,
                                 std::vector<std::size_t>(f.begin() + static_cast<long>(b), f.begin() + static_cast<long>(e)),
                                 options.features);
      auto ns = extract_features(model, novel, pname, true,
                                 std::vector<std::size_t>(v.begin() + static_cast<long>(b), v.begin() + static_cast<long>(e)),
                                 options.features);
      fs.insert(fs.end(), ns.begin(), ns.end());
      return fs;
    };
    if (n - n_hold == 0) continue;
    const auto hold = n_hold > 0 ? features(0, n_hold) : std::vector<LogitFeature>{};
    out.push_back(fit_detector(kind, pname, features(n_hold, n), hold, options.fit));
  }
  return out;
}

std::string LocoReport::to_json() const {
  nlohmann::ordered_json doc{{"detector", detector_name(kind)}, {"overall_accuracy", overall}};
  doc["parents"] = nlohmann::ordered_json::array();
  for (const auto& p : parents) {
    nlohmann::ordered_json folds = nlohmann::ordered_json::array();
    for (const auto& f : p.folds) {
      folds.push_back({{"novel_class", f.novel_class},
                       {"accuracy", f.accuracy},
                       {"train_per_side", f.n_train},
                       {"holdout_per_side", f.n_holdout},
                       {"test_per_side", f.n_test}});
    }
    doc["parents"].push_back({{"parent", p.parent}, {"accuracy", p.accuracy}, {"folds", folds}});
  }
  doc["warnings"] = warnings;
  return doc.dump(2);
}

std::string detectors_to_json(const std::vector<NoveltyDetector>& detectors, std::uint64_t checkpoint_hash) {
  nlohmann::ordered_json doc{{"checkpoint", hex64(checkpoint_hash)}, {"detectors", nlohmann::ordered_json::array()}};
  for (const auto& d : detectors) {
    doc["detectors"].push_back({{"parent", d.parent},
                                {"kind", detector_name(d.kind)},
                                {"threshold", d.threshold},
                                {"mean", d.mean},
                                {"scale", d.scale},
                                {"weights", d.weights},
                                {"bias", d.bias},
                                {"penalty", d.penalty}});
  }
  return doc.dump(2);
}

std::vector<NoveltyDetector> detectors_from_json(const std::string& text, std::uint64_t expected_checkpoint_hash) {
  const auto doc = nlohmann::json::parse(text);
  const std::string stored = doc.at("checkpoint").get<std::string>();
  if (stored != hex64(expected_checkpoint_hash)) {
    throw std::runtime_error("detector sidecar belongs to checkpoint " + stored + ", not " +
                             hex64(expected_checkpoint_hash));
  }
  std::vector<NoveltyDetector> out;
  for (const auto& j : doc.at("detectors")) {
    NoveltyDetector d;
    d.parent = j.at("parent").get<std::string>();
    d.kind = parse_detector(j.at("kind").get<std::string>());
    d.threshold = j.at("threshold").get<double>();
    d.mean = j.at("mean").get<std::vector<double>>();
    d.scale = j.at("scale").get<std::vector<double>>();
    d.weights = j.at("weights").get<std::vector<double>>();
    d.bias = j.at("bias").get<double>();
    d.penalty = j.at("penalty").get<double>();
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace hpnet
