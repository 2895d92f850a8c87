// Command-line front end: train, eval, explain, neighbors, novelty, synth.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "hpnet/data.hpp"
#include "hpnet/explain.hpp"
#include "hpnet/hash.hpp"
#include "hpnet/inference.hpp"
#include "hpnet/model.hpp"
#include "hpnet/novelty.hpp"
#include "hpnet/taxonomy.hpp"
#include "hpnet/training.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace hpnet;

namespace {

// Bad input from the user: exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

void require_file(const std::string& path, const char* what) {
  if (path.empty()) return;
  if (!fs::exists(path)) throw UsageError(std::string(what) + " not found: " + path);
}

std::vector<std::size_t> parse_list(const std::string& text, const char* flag) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      const unsigned long v = std::stoul(part, &used);
      if (used != part.size()) throw std::invalid_argument(part);
      out.push_back(v);
    } catch (const std::exception&) {
      throw UsageError(std::string("--") + flag + ": '" + part + "' is not a non-negative integer");
    }
  }
  return out;
}

// ---- data sources -----------------------------------------------------------

struct DataOptions {
  std::string synthetic;
  std::string data;
  std::string novel_data;
  std::size_t holdout_per_class = 0;
  double holdout_fraction = 50.0 / 1300.0;

  void add(CLI::App* cmd, bool with_novel) {
    cmd->add_option("--synthetic", synthetic, "Synthetic dataset spec (JSON)");
    cmd->add_option("--data", data, "Image directory laid out as <root>/<leaf-class>/*.png|ppm");
    if (with_novel) {
      cmd->add_option("--novel-data", novel_data, "Novel images laid out as <root>/<coarse>/<novel-class>/*");
    }
    cmd->add_option("--holdout-per-class", holdout_per_class, "Validation images per class for --data (0 = use fraction)");
    cmd->add_option("--holdout-fraction", holdout_fraction, "Validation fraction per class for --data");
  }
  void check() const {
    if (synthetic.empty() == data.empty()) throw UsageError("exactly one of --synthetic or --data is required");
    require_file(synthetic, "synthetic spec");
    require_file(data, "data directory");
    require_file(novel_data, "novel data directory");
  }
  json to_json() const {
    return {{"synthetic", synthetic},
            {"data", data},
            {"novel_data", novel_data},
            {"holdout_per_class", holdout_per_class},
            {"holdout_fraction", holdout_fraction}};
  }
};

struct LoadedData {
  LabeledDataset train, val, test, novel;
  std::size_t image_size = 0;
  std::uint64_t seed = 0;
  std::string manifest;
};

LabeledDataset load_novel_directory(const fs::path& root) {
  LabeledDataset ds;
  ds.split = Split::novel;
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    const auto ext = entry.path().extension().string();
    if (ext == ".png" || ext == ".ppm") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    const auto rel = fs::relative(f, root);
    std::vector<std::string> parts;
    for (const auto& p : rel.parent_path()) parts.push_back(p.string());
    if (parts.size() != 2) throw UsageError("novel image " + f.string() + " is not under <coarse>/<novel-class>/");
    ds.items.push_back({"novel/" + rel.generic_string(), load_image(f), HierarchicalLabel{parts}});
  }
  return ds;
}

LoadedData load_data(const DataOptions& opt, const Taxonomy& taxonomy) {
  LoadedData out;
  if (!opt.synthetic.empty()) {
    const SyntheticSpec spec = SyntheticSpec::load(opt.synthetic);
    if (spec.taxonomy().canonical_text() != taxonomy.canonical_text()) {
      throw UsageError("synthetic spec " + opt.synthetic + " does not describe the given taxonomy");
    }
    auto ds = generate_synthetic(spec);
    out.train = std::move(ds.train);
    out.val = std::move(ds.val);
    out.test = std::move(ds.test);
    out.novel = std::move(ds.novel);
    out.image_size = spec.image_size;
    out.seed = spec.seed;
  } else {
    SplitPolicy policy;
    policy.holdout_per_class = opt.holdout_per_class;
    policy.holdout_fraction = opt.holdout_fraction;
    auto splits = load_directory(opt.data, taxonomy, policy);
    out.train = std::move(splits.train);
    out.val = std::move(splits.val);
    out.test = out.val;
    out.test.split = Split::test;
    if (out.train.empty()) throw UsageError("no images found under " + opt.data);
    out.image_size = out.train.items.front().image.height;
  }
  if (!opt.novel_data.empty()) out.novel = load_novel_directory(opt.novel_data);
  if (!out.novel.empty()) validate_dataset(out.novel, taxonomy);
  out.manifest = dataset_manifest({&out.train, &out.val, &out.test, &out.novel}, out.seed);
  return out;
}

LabeledDataset& pick_split(LoadedData& d, const std::string& split) {
  if (split == "train") return d.train;
  if (split == "val") return d.val;
  if (split == "test") return d.test;
  if (split == "novel") return d.novel;
  throw UsageError("--split must be one of train, val, test, novel");
}

std::shared_ptr<Taxonomy> load_taxonomy(const std::string& path) {
  if (!fs::exists(path)) throw UsageError("taxonomy file not found: " + path);
  return std::make_shared<Taxonomy>(Taxonomy::load(path));
}

std::unique_ptr<HpnetModel> load_model(const std::string& checkpoint, const Taxonomy* expected) {
  if (!fs::exists(checkpoint)) throw UsageError("checkpoint not found: " + checkpoint);
  return load_checkpoint(checkpoint, expected);
}

// ---- train ------------------------------------------------------------------

struct TrainArgs {
  std::string taxonomy;
  DataOptions data;
  std::string out;
  std::uint64_t seed = 7;
  TrainConfig config;
  std::string channels = "16,32,64,64";
  std::string pools = "2,2,2,1";
  std::size_t kernel = 3;
  std::size_t input_size = 0;
  ModelConfig model;
  bool quiet = false;
};

int run_train(TrainArgs& a) {
  require_file(a.taxonomy, "taxonomy file");
  a.data.check();
  auto taxonomy = load_taxonomy(a.taxonomy);
  LoadedData data = load_data(a.data, *taxonomy);

  const auto channels = parse_list(a.channels, "channels");
  const auto pools = parse_list(a.pools, "pools");
  if (channels.size() != pools.size()) throw UsageError("--channels and --pools must have the same length");
  a.model.backbone.stages.clear();
  for (std::size_t i = 0; i < channels.size(); ++i) a.model.backbone.stages.push_back({channels[i], a.kernel, pools[i]});
  a.model.backbone.input_size = a.input_size ? a.input_size : data.image_size;
  a.model.seed = a.seed;
  a.config.seed = a.seed;
  try {
    a.model.validate();
    a.config.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  const fs::path out(a.out);
  fs::create_directories(out);
  const TrainSchedule& s = a.config.schedule;
  const LossWeights& w = a.config.weights;
  json cfg{{"command", "train"},
           {"taxonomy", a.taxonomy},
           {"data", a.data.to_json()},
           {"out", a.out},
           {"seed", a.seed},
           {"schedule",
            {{"epochs_conv", s.epochs_conv},
             {"epochs_all", s.epochs_all},
             {"epochs_convex", s.epochs_convex},
             {"epochs_convex_final", s.epochs_convex_final},
             {"projection_period", s.projection_period}}},
           {"loss_weights", {{"lambda_clust", w.clust}, {"lambda_sep", w.sep}, {"lambda_reg", w.reg}}},
           {"optimizer",
            {{"lr_conv", a.config.lr_conv},
             {"lr_all", a.config.lr_all},
             {"lr_convex", a.config.lr_convex},
             {"momentum", a.config.momentum},
             {"batch_size", a.config.batch_size}}},
           {"ceda", a.config.ceda},
           {"augment", a.config.augment},
           {"patience", a.config.patience},
           {"model", json::parse(a.model.to_json())}};
  write_file(out / "config.json", cfg.dump(2) + "\n");
  write_file(out / "manifest.json", data.manifest + "\n");

  HpnetModel model(taxonomy, a.model);
  Trainer trainer(model, data.train, data.val, a.config);
  std::ofstream log(out / "train.log", std::ios::binary);
  log << EpochLog::header() << "\n";
  trainer.on_log = [&](const EpochLog& l) {
    log << l.to_line() << "\n";
    log.flush();
    if (!a.quiet) std::cerr << l.to_line() << "\n";
  };
  TrainResult result = trainer.train();
  save_checkpoint(*result.best, out / "model.hpn");
  for (const auto& p : result.projections) {
    if (p.epoch == result.best_epoch) write_file(out / "projection.json", p.to_json() + "\n");
  }
  std::cout << "best epoch " << result.best_epoch << " val_fine_acc " << result.best_val << "\n"
            << "checkpoint " << (out / "model.hpn").string() << " " << hex64(file_digest(out / "model.hpn")) << "\n";
  return 0;
}

// ---- eval -------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, taxonomy, out, split = "test";
  DataOptions data;
  std::size_t k = 5;
};

int run_eval(EvalArgs& a) {
  a.data.check();
  std::shared_ptr<Taxonomy> taxonomy;
  if (!a.taxonomy.empty()) taxonomy = load_taxonomy(a.taxonomy);
  auto model = load_model(a.checkpoint, taxonomy.get());
  LoadedData data = load_data(a.data, model->taxonomy());
  LabeledDataset& labeled = pick_split(data, a.split);
  const AccuracyReport acc = accuracy_suite(*model, labeled, data.novel);
  const ClusteringQuality q = clustering_quality(*model, labeled, a.k);
  const std::string text = metrics_text(acc, &q);
  std::cout << text;
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_file(fs::path(a.out) / "metrics.txt", text);
    write_file(fs::path(a.out) / "metrics.json", metrics_json(acc, &q) + "\n");
  }
  return 0;
}

// ---- explain / neighbors ------------------------------------------------------

struct ExplainArgs {
  std::string checkpoint, taxonomy, out, split = "test", projection;
  DataOptions data;
  std::vector<std::string> image_ids;
  std::size_t limit = 10;
  std::size_t top_k = 4;
};

int run_explain(ExplainArgs& a) {
  a.data.check();
  std::shared_ptr<Taxonomy> taxonomy;
  if (!a.taxonomy.empty()) taxonomy = load_taxonomy(a.taxonomy);
  auto model = load_model(a.checkpoint, taxonomy.get());
  LoadedData data = load_data(a.data, model->taxonomy());
  const LabeledDataset& ds = pick_split(data, a.split);
  std::optional<ProjectionReport> projection;
  if (!a.projection.empty()) {
    require_file(a.projection, "projection report");
    std::ifstream f(a.projection);
    const auto doc = nlohmann::json::parse(f);
    ProjectionReport r;
    r.epoch = doc.at("epoch").get<std::size_t>();
    for (const auto& p : doc.at("prototypes")) {
      ProjectionRecord rec;
      rec.parent = p.at("parent").get<std::string>();
      rec.prototype = p.at("prototype").get<std::size_t>();
      rec.child = p.at("class").get<std::string>();
      rec.image_id = p.at("image_id").get<std::string>();
      rec.position = {p.at("row").get<std::size_t>(), p.at("col").get<std::size_t>()};
      rec.distance = p.at("distance").get<double>();
      r.records.push_back(std::move(rec));
    }
    projection = std::move(r);
  }
  std::vector<std::size_t> chosen;
  if (a.image_ids.empty()) {
    for (std::size_t i = 0; i < std::min(a.limit, ds.size()); ++i) chosen.push_back(i);
  } else {
    for (const auto& id : a.image_ids) {
      const auto it = std::find_if(ds.items.begin(), ds.items.end(), [&](const LabeledItem& x) { return x.id == id; });
      if (it == ds.items.end()) throw UsageError("image id not found in split " + a.split + ": " + id);
      chosen.push_back(static_cast<std::size_t>(it - ds.items.begin()));
    }
  }
  const fs::path root = fs::path(a.out) / "explain";
  for (std::size_t i : chosen) {
    const LabeledItem& item = ds.items[i];
    const Tensor image({item.image.channels, item.image.height, item.image.width}, item.image.pixels);
    const Explanation ex = explain_prediction(*model, image, item.id, a.top_k, projection ? &*projection : nullptr);
    write_explanation(ex, item.image, root);
    for (const auto& w : ex.warnings) std::cerr << "warning: " << item.id << ": " << w << "\n";
  }
  std::cout << "wrote " << chosen.size() << " explanations under " << root.string() << "\n";
  return 0;
}

struct NeighborArgs {
  std::string checkpoint, taxonomy, out, split = "test", parent;
  DataOptions data;
  std::size_t prototype = 0, k = 5;
};

int run_neighbors(NeighborArgs& a) {
  a.data.check();
  std::shared_ptr<Taxonomy> taxonomy;
  if (!a.taxonomy.empty()) taxonomy = load_taxonomy(a.taxonomy);
  auto model = load_model(a.checkpoint, taxonomy.get());
  LoadedData data = load_data(a.data, model->taxonomy());
  const LabeledDataset& ds = pick_split(data, a.split);
  const std::string parent = a.parent.empty() ? model->taxonomy().name(model->taxonomy().root()) : a.parent;
  if (!model->taxonomy().find(parent)) throw UsageError("unknown parent node: " + parent);
  const NeighborList list = prototype_neighbors(*model, ds, parent, a.prototype, a.k);
  const fs::path dir = fs::path(a.out) / "neighbors" / (path_component(parent) + "_" + std::to_string(a.prototype));
  fs::create_directories(dir);
  for (std::size_t r = 0; r < list.neighbors.size(); ++r) {
    const Neighbor& n = list.neighbors[r];
    const std::string stem = std::to_string(r + 1) + "_" + path_component(n.image_id);
    save_png(overlay(ds.items[n.image_index].image, n.heat), dir / (stem + ".png"));
    write_file(dir / (stem + ".txt"), heat_map_text(n.heat));
  }
  write_file(dir / "neighbors.json", list.to_json() + "\n");
  for (const auto& w : list.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << list.to_json() << "\n";
  return 0;
}

// ---- novelty ------------------------------------------------------------------

struct NoveltyArgs {
  std::string checkpoint, taxonomy, out, kind = "LogisticReg", familiar_split = "test";
  DataOptions data;
  std::uint64_t seed = 7;
  std::size_t holdout = 50;
  bool root_logits = true;
};

int run_novelty(NoveltyArgs& a) {
  a.data.check();
  std::shared_ptr<Taxonomy> taxonomy;
  if (!a.taxonomy.empty()) taxonomy = load_taxonomy(a.taxonomy);
  auto model = load_model(a.checkpoint, taxonomy.get());
  LoadedData data = load_data(a.data, model->taxonomy());
  if (data.novel.empty()) throw UsageError("novelty needs novel images (--synthetic with novel classes or --novel-data)");
  DetectorKind kind;
  try {
    kind = parse_detector(a.kind);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  LocoOptions opt;
  opt.seed = a.seed;
  opt.holdout = a.holdout;
  opt.features.include_root = a.root_logits;
  const LocoReport report =
      loco_evaluate(*model, kind, data.train, pick_split(data, a.familiar_split), data.novel, opt);
  const auto detectors = fit_parent_detectors(*model, kind, data.train, data.novel, opt);
  fs::create_directories(a.out);
  write_file(fs::path(a.out) / "loco.json", report.to_json() + "\n");
  write_file(fs::path(a.out) / "detectors.json", detectors_to_json(detectors, file_digest(a.checkpoint)) + "\n");
  std::ostringstream text;
  text.precision(17);
  text << "detector=" << detector_name(kind) << "\n";
  for (const auto& p : report.parents) {
    text << "parent." << p.parent << ".accuracy=" << p.accuracy << "\n";
    text << "parent." << p.parent << ".folds=" << p.folds.size() << "\n";
  }
  text << "overall_accuracy=" << report.overall << "\n";
  write_file(fs::path(a.out) / "loco.txt", text.str());
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << text.str();
  return 0;
}

// ---- synth ----------------------------------------------------------------------

struct SynthArgs {
  std::string spec, out;
};

int run_synth(SynthArgs& a) {
  require_file(a.spec, "synthetic spec");
  const SyntheticSpec spec = a.spec.empty() ? pinned_synthetic_spec() : SyntheticSpec::load(a.spec);
  spec.validate();
  const fs::path out(a.out);
  fs::create_directories(out);
  write_file(out / "spec.json", spec.to_json() + "\n");
  write_file(out / "taxonomy.json", nlohmann::json::parse(spec.taxonomy().canonical_text()).dump(2) + "\n");
  const auto ds = generate_synthetic(spec);
  for (const LabeledDataset* d : {&ds.train, &ds.val, &ds.test, &ds.novel}) {
    export_dataset(*d, out / "images" / split_name(d->split));
  }
  write_file(out / "manifest.json", dataset_manifest({&ds.train, &ds.val, &ds.test, &ds.novel}, spec.seed) + "\n");
  std::cout << "wrote " << (out / "spec.json").string() << " and " << (out / "taxonomy.json").string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical prototype network tools"};
  app.require_subcommand(1);
  app.get_formatter()->column_width(40);

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model and write model.hpn, train.log, config.json");
  train->add_option("--taxonomy", ta.taxonomy, "Taxonomy JSON file")->required();
  ta.data.add(train, true);
  train->add_option("--out", ta.out, "Output directory")->required();
  train->add_option("--seed", ta.seed, "Random seed")->capture_default_str();
  train->add_option("--epochs-conv", ta.config.schedule.epochs_conv)->capture_default_str();
  train->add_option("--epochs-all", ta.config.schedule.epochs_all)->capture_default_str();
  train->add_option("--epochs-convex", ta.config.schedule.epochs_convex)->capture_default_str();
  train->add_option("--epochs-convex-final", ta.config.schedule.epochs_convex_final)->capture_default_str();
  train->add_option("--projection-period", ta.config.schedule.projection_period)->capture_default_str();
  train->add_option("--lambda-clust", ta.config.weights.clust)->capture_default_str();
  train->add_option("--lambda-sep", ta.config.weights.sep)->capture_default_str();
  train->add_option("--lambda-reg", ta.config.weights.reg)->capture_default_str();
  train->add_option("--lr-conv", ta.config.lr_conv)->capture_default_str();
  train->add_option("--lr-all", ta.config.lr_all)->capture_default_str();
  train->add_option("--lr-convex", ta.config.lr_convex)->capture_default_str();
  train->add_option("--momentum", ta.config.momentum)->capture_default_str();
  train->add_option("--batch-size", ta.config.batch_size)->capture_default_str();
  train->add_option("--ceda", ta.config.ceda, "Add uniform-target noise images to every batch")->capture_default_str();
  train->add_option("--augment", ta.config.augment, "Random resized crops on training images")->capture_default_str();
  train->add_option("--patience", ta.config.patience, "Stop after this many cycles without improvement (0 = off)")
      ->capture_default_str();
  train->add_option("--channels", ta.channels, "Backbone stage channels")->capture_default_str();
  train->add_option("--pools", ta.pools, "Max-pool window after each stage")->capture_default_str();
  train->add_option("--kernel", ta.kernel, "Backbone kernel size (odd)")->capture_default_str();
  train->add_option("--input-size", ta.input_size, "Input side length (0 = image size of the data)")
      ->capture_default_str();
  train->add_option("--adapter-channels", ta.model.backbone.adapter_channels, "Latent depth D'")->capture_default_str();
  train->add_option("--prototypes-per-child", ta.model.prototypes_per_child)->capture_default_str();
  train->add_option("--epsilon", ta.model.epsilon, "Similarity epsilon")->capture_default_str();
  train->add_flag("--quiet", ta.quiet, "Do not echo the training log");

  EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Accuracy and clustering-quality metrics");
  eval->add_option("--checkpoint", ea.checkpoint)->required();
  eval->add_option("--taxonomy", ea.taxonomy, "Refuse checkpoints built for another taxonomy");
  ea.data.add(eval, true);
  eval->add_option("--split", ea.split, "Labeled split to score")->capture_default_str();
  eval->add_option("--k", ea.k, "Neighbors per prototype for clustering quality")->capture_default_str();
  eval->add_option("--out", ea.out, "Directory for metrics.txt and metrics.json");

  ExplainArgs xa;
  auto* explain = app.add_subcommand("explain", "Prototype evidence and heat maps per image");
  explain->add_option("--checkpoint", xa.checkpoint)->required();
  explain->add_option("--taxonomy", xa.taxonomy);
  xa.data.add(explain, true);
  explain->add_option("--split", xa.split)->capture_default_str();
  explain->add_option("--image-id", xa.image_ids, "Image to explain (repeatable)");
  explain->add_option("--limit", xa.limit, "Images to explain when no --image-id is given")->capture_default_str();
  explain->add_option("--top-k", xa.top_k)->capture_default_str();
  explain->add_option("--projection", xa.projection, "projection.json written by train");
  explain->add_option("--out", xa.out)->required();

  NeighborArgs na;
  auto* neighbors = app.add_subcommand("neighbors", "Nearest images to one prototype");
  neighbors->add_option("--checkpoint", na.checkpoint)->required();
  neighbors->add_option("--taxonomy", na.taxonomy);
  na.data.add(neighbors, true);
  neighbors->add_option("--split", na.split)->capture_default_str();
  neighbors->add_option("--parent", na.parent, "Parent node owning the prototype (default root)");
  neighbors->add_option("--prototype", na.prototype)->capture_default_str();
  neighbors->add_option("--k", na.k)->capture_default_str();
  neighbors->add_option("--out", na.out)->required();

  NoveltyArgs va;
  auto* novelty = app.add_subcommand("novelty", "Leave-one-class-out novelty detection");
  novelty->add_option("--checkpoint", va.checkpoint)->required();
  novelty->add_option("--taxonomy", va.taxonomy);
  va.data.add(novelty, true);
  novelty->add_option("--kind", va.kind, "PbThreshold, ScoreSVM or LogisticReg")->capture_default_str();
  novelty->add_option("--familiar-split", va.familiar_split, "Familiar test images")->capture_default_str();
  novelty->add_option("--seed", va.seed)->capture_default_str();
  novelty->add_option("--holdout", va.holdout, "Tuning images carved from each fold's training set")
      ->capture_default_str();
  novelty->add_option("--root-logits", va.root_logits, "Append root logits to the features")->capture_default_str();
  novelty->add_option("--out", va.out)->required();

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Write a synthetic spec, its taxonomy and the rendered images");
  synth->add_option("--synthetic", sa.spec, "Spec to render (default: the pinned 3x2 shapes spec)");
  synth->add_option("--out", sa.out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train) return run_train(ta);
    if (*eval) return run_eval(ea);
    if (*explain) return run_explain(xa);
    if (*neighbors) return run_neighbors(na);
    if (*novelty) return run_novelty(va);
    if (*synth) return run_synth(sa);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const TaxonomyError& e) {
    std::cerr << "error: taxonomy: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
