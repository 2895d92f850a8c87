#include "hpnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "hpnet/hash.hpp"

namespace hpnet {

using nlohmann::json;

const char* split_name(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::novel: return "novel";
  }
  return "unknown";
}

Tensor LabeledDataset::batch(const std::vector<std::size_t>& indices) const {
  if (indices.empty()) throw DimensionError("LabeledDataset::batch: empty selection");
  const Image& first = items.at(indices.front()).image;
  const std::size_t per = first.pixels.size();
  std::vector<double> values;
  values.reserve(per * indices.size());
  for (std::size_t i : indices) {
    const Image& img = items.at(i).image;
    if (img.channels != first.channels || img.height != first.height || img.width != first.width) {
      throw DimensionError("LabeledDataset::batch: item " + items[i].id + " has a different size");
    }
    values.insert(values.end(), img.pixels.begin(), img.pixels.end());
  }
  return Tensor({indices.size(), first.channels, first.height, first.width}, std::move(values));
}

Tensor LabeledDataset::batch(std::size_t begin, std::size_t end) const {
  std::vector<std::size_t> idx;
  for (std::size_t i = begin; i < end; ++i) idx.push_back(i);
  return batch(idx);
}

std::vector<std::size_t> LabeledDataset::indices_under(const std::string& node_name) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& path = items[i].label.path;
    if (std::find(path.begin(), path.end(), node_name) != path.end()) out.push_back(i);
  }
  return out;
}

void validate_dataset(const LabeledDataset& dataset, const Taxonomy& taxonomy) {
  for (const auto& item : dataset.items) {
    const LabelCheck check = dataset.split == Split::novel ? validate_coarse_label(taxonomy, item.label)
                                                           : validate_label(taxonomy, item.label);
    if (!check) throw std::invalid_argument("item " + item.id + ": " + check.message);
  }
}

std::size_t holdout_count(std::size_t class_size, const SplitPolicy& policy) {
  if (policy.holdout_per_class > 0) return std::min(policy.holdout_per_class, class_size);
  const auto n = static_cast<std::size_t>(std::lround(policy.holdout_fraction * static_cast<double>(class_size)));
  return std::min(n, class_size);
}

DirectorySplits load_directory(const std::filesystem::path& root, const Taxonomy& taxonomy,
                               const SplitPolicy& policy) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw std::runtime_error("not a directory: " + root.string());
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  std::sort(class_dirs.begin(), class_dirs.end());

  std::vector<std::string> unknown;
  for (const auto& dir : class_dirs) {
    const auto node = taxonomy.find(dir.filename().string());
    if (!node || !taxonomy.is_leaf(*node)) unknown.push_back(dir.filename().string());
  }
  if (!unknown.empty()) {
    std::string msg = "directories are not taxonomy leaves:";
    for (const auto& u : unknown) msg += " " + u;
    throw std::invalid_argument(msg);
  }

  DirectorySplits out;
  out.train.split = Split::train;
  out.val.split = Split::val;
  for (const auto& dir : class_dirs) {
    const std::string leaf = dir.filename().string();
    const HierarchicalLabel label = taxonomy.label_of(taxonomy.index_of(leaf));
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      std::string ext = entry.path().extension().string();
      std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
      if (entry.is_regular_file() && (ext == ".png" || ext == ".ppm")) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    const std::size_t holdout = holdout_count(files.size(), policy);
    for (std::size_t i = 0; i < files.size(); ++i) {
      LabeledItem item{leaf + "/" + files[i].filename().string(), load_image(files[i]), label};
      (i + holdout >= files.size() ? out.val : out.train).items.push_back(std::move(item));
    }
  }
  return out;
}

Image augment_crop(const Image& image, CropMode mode, std::size_t out, Rng& rng) {
  if (mode == CropMode::test) {
    const auto resized = static_cast<std::size_t>(std::lround(static_cast<double>(out) * 8.0 / 7.0));
    const Image r = resize_bilinear(image, resized, resized);
    const std::size_t off = (resized - out) / 2;
    return crop(r, off, off, out, out);
  }
  const double area = static_cast<double>(image.height * image.width);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(0.5, 1.0);
    const double ratio = rng.uniform(3.0 / 4.0, 4.0 / 3.0);
    const auto w = static_cast<std::size_t>(std::lround(std::sqrt(target * ratio)));
    const auto h = static_cast<std::size_t>(std::lround(std::sqrt(target / ratio)));
    if (w == 0 || h == 0 || w > image.width || h > image.height) continue;
    const std::size_t top = rng.below(image.height - h + 1);
    const std::size_t left = rng.below(image.width - w + 1);
    return resize_bilinear(crop(image, top, left, h, w), out, out);
  }
  // Fallback: central crop at the nearest admissible aspect ratio.
  const std::size_t side = std::min(image.height, image.width);
  return resize_bilinear(crop(image, (image.height - side) / 2, (image.width - side) / 2, side, side), out,
                         out);
}

Tensor noise_batch(const Shape& shape, Rng& rng) {
  Tensor t(shape);
  for (double& v : t.data()) v = rng.uniform();
  return t;
}

// ---- synthetic shapes -------------------------------------------------------

const char* shape_family_name(ShapeFamily family) {
  switch (family) {
    case ShapeFamily::square: return "square";
    case ShapeFamily::disc: return "disc";
    case ShapeFamily::cross: return "cross";
    case ShapeFamily::triangle: return "triangle";
    case ShapeFamily::ring: return "ring";
  }
  return "unknown";
}

ShapeFamily parse_shape_family(const std::string& name) {
  for (auto f : {ShapeFamily::square, ShapeFamily::disc, ShapeFamily::cross, ShapeFamily::triangle,
                 ShapeFamily::ring}) {
    if (name == shape_family_name(f)) return f;
  }
  throw std::invalid_argument("unknown shape family '" + name + "'");
}

namespace {

bool inside_shape(ShapeFamily family, double dx, double dy, double r) {
  switch (family) {
    case ShapeFamily::square: return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
    case ShapeFamily::disc: return dx * dx + dy * dy <= r * r;
    case ShapeFamily::cross:
      return (std::abs(dx) <= r && std::abs(dy) <= 0.3 * r) || (std::abs(dy) <= r && std::abs(dx) <= 0.3 * r);
    case ShapeFamily::triangle: return dy >= -r && dy <= r && std::abs(dx) <= 0.5 * (dy + r);
    case ShapeFamily::ring: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.3 * r * r;
    }
  }
  return false;
}

json class_to_json(const SyntheticClass& c) {
  return {{"fine", c.fine}, {"coarse", c.coarse}, {"shape", shape_family_name(c.shape)}, {"color", c.color}};
}

SyntheticClass class_from_json(const json& j) {
  SyntheticClass c;
  c.fine = j.at("fine").get<std::string>();
  c.coarse = j.at("coarse").get<std::string>();
  c.shape = parse_shape_family(j.at("shape").get<std::string>());
  c.color = j.at("color").get<std::array<double, 3>>();
  return c;
}

std::string item_id(Split split, const std::string& fine, std::size_t index) {
  std::ostringstream os;
  os << split_name(split) << '/' << fine << '/' << std::setw(4) << std::setfill('0') << index;
  return os.str();
}

}  // namespace

void SyntheticSpec::validate() const {
  if (image_size < 8) throw std::invalid_argument("synthetic: image_size must be >= 8");
  std::map<std::string, ShapeFamily> coarse_shape;
  std::map<std::string, std::size_t> fine_per_coarse;
  std::set<std::string> fine_names;
  std::set<std::pair<int, std::array<double, 3>>> recipes;
  auto check_recipe = [&](const SyntheticClass& c) {
    if (!fine_names.insert(c.fine).second) {
      throw std::invalid_argument("synthetic: duplicate fine class '" + c.fine + "'");
    }
    if (!recipes.insert({static_cast<int>(c.shape), c.color}).second) {
      throw std::invalid_argument("synthetic: recipe collision for '" + c.fine +
                                  "' (same shape and color as another class)");
    }
  };
  for (const auto& c : classes) {
    check_recipe(c);
    auto [it, inserted] = coarse_shape.emplace(c.coarse, c.shape);
    if (!inserted && it->second != c.shape) {
      throw std::invalid_argument("synthetic: fine classes of '" + c.coarse + "' must share one shape family");
    }
    ++fine_per_coarse[c.coarse];
  }
  std::set<ShapeFamily> families;
  for (const auto& [coarse, shape] : coarse_shape) {
    if (!families.insert(shape).second) {
      throw std::invalid_argument("synthetic: two coarse classes share the shape family " +
                                  std::string(shape_family_name(shape)));
    }
  }
  if (coarse_shape.size() < 2) throw std::invalid_argument("synthetic: need at least 2 coarse classes");
  for (const auto& [coarse, n] : fine_per_coarse) {
    if (n < 2) throw std::invalid_argument("synthetic: coarse class '" + coarse + "' needs >= 2 fine classes");
  }
  for (const auto& c : novel_classes) {
    check_recipe(c);
    auto it = coarse_shape.find(c.coarse);
    if (it == coarse_shape.end() || it->second != c.shape) {
      throw std::invalid_argument("synthetic: novel class '" + c.fine +
                                  "' must use the shape family of a known coarse class");
    }
    if (coarse_shape.count(c.fine)) {
      throw std::invalid_argument("synthetic: novel class name '" + c.fine + "' collides with a coarse class");
    }
  }
}

Taxonomy SyntheticSpec::taxonomy() const {
  std::vector<std::string> coarse_order;
  for (const auto& c : classes)
    if (std::find(coarse_order.begin(), coarse_order.end(), c.coarse) == coarse_order.end())
      coarse_order.push_back(c.coarse);
  json root{{"name", "root"}, {"children", json::array()}};
  for (const auto& coarse : coarse_order) {
    json node{{"name", coarse}, {"children", json::array()}};
    for (const auto& c : classes)
      if (c.coarse == coarse) node["children"].push_back({{"name", c.fine}});
    root["children"].push_back(std::move(node));
  }
  return Taxonomy::parse(root.dump(2));
}

std::string SyntheticSpec::to_json() const {
  json doc{{"image_size", image_size},
           {"seed", seed},
           {"train_per_class", train_per_class},
           {"val_per_class", val_per_class},
           {"test_per_class", test_per_class},
           {"novel_per_class", novel_per_class},
           {"clutter", clutter},
           {"color_jitter", color_jitter},
           {"classes", json::array()},
           {"novel_classes", json::array()}};
  for (const auto& c : classes) doc["classes"].push_back(class_to_json(c));
  for (const auto& c : novel_classes) doc["novel_classes"].push_back(class_to_json(c));
  return doc.dump(2);
}

SyntheticSpec SyntheticSpec::from_json(const std::string& text) {
  const json doc = json::parse(text);
  SyntheticSpec s;
  s.image_size = doc.value("image_size", s.image_size);
  s.seed = doc.value("seed", s.seed);
  s.train_per_class = doc.value("train_per_class", s.train_per_class);
  s.val_per_class = doc.value("val_per_class", s.val_per_class);
  s.test_per_class = doc.value("test_per_class", s.test_per_class);
  s.novel_per_class = doc.value("novel_per_class", s.novel_per_class);
  s.clutter = doc.value("clutter", s.clutter);
  s.color_jitter = doc.value("color_jitter", s.color_jitter);
  for (const auto& c : doc.at("classes")) s.classes.push_back(class_from_json(c));
  if (doc.contains("novel_classes"))
    for (const auto& c : doc.at("novel_classes")) s.novel_classes.push_back(class_from_json(c));
  return s;
}

SyntheticSpec SyntheticSpec::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open synthetic spec " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

SyntheticSpec pinned_synthetic_spec() {
  SyntheticSpec s;
  const std::array<double, 3> red{0.95, 0.2, 0.15}, blue{0.15, 0.3, 0.95};
  const std::array<double, 3> magenta{0.9, 0.2, 0.9}, white{0.9, 0.9, 0.9};
  const std::pair<const char*, ShapeFamily> families[] = {
      {"square", ShapeFamily::square}, {"disc", ShapeFamily::disc}, {"cross", ShapeFamily::cross}};
  for (const auto& [coarse, shape] : families) {
    s.classes.push_back({std::string(coarse) + "_red", coarse, shape, red});
    s.classes.push_back({std::string(coarse) + "_blue", coarse, shape, blue});
    s.novel_classes.push_back({std::string(coarse) + "_magenta", coarse, shape, magenta});
    s.novel_classes.push_back({std::string(coarse) + "_white", coarse, shape, white});
  }
  return s;
}

Image render_synthetic(const SyntheticSpec& spec, const SyntheticClass& recipe, const std::string& id) {
  Rng rng(spec.seed ^ fnv1a(id));
  const std::size_t n = spec.image_size;
  const double size = static_cast<double>(n);
  Image img(3, n, n);

  const double base = rng.uniform(0.05, 0.25);
  for (double& v : img.pixels) v = base;
  // Gray distractor patches carry no class information.
  const std::size_t distractors = 2 + rng.below(3);
  for (std::size_t d = 0; d < distractors; ++d) {
    const std::size_t side = 2 + rng.below(std::max<std::size_t>(n / 12, 1) + 1);
    const std::size_t top = rng.below(n - side), left = rng.below(n - side);
    const double level = rng.uniform(0.25, 0.55);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = top; y < top + side; ++y)
        for (std::size_t x = left; x < left + side; ++x) img.at(c, y, x) = level;
  }

  const double r = size * rng.uniform(0.2, 0.3);
  const double cx = rng.uniform(r + 1.0, size - r - 1.0);
  const double cy = rng.uniform(r + 1.0, size - r - 1.0);
  const double brightness = rng.uniform(0.85, 1.0);
  std::array<double, 3> color{};
  for (std::size_t c = 0; c < 3; ++c) {
    color[c] = std::clamp(brightness * recipe.color[c] + rng.uniform(-spec.color_jitter, spec.color_jitter),
                          0.0, 1.0);
  }
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x)
      if (inside_shape(recipe.shape, x + 0.5 - cx, y + 0.5 - cy, r))
        for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = color[c];

  for (double& v : img.pixels) v = std::clamp(v + rng.uniform(-spec.clutter, spec.clutter), 0.0, 1.0);
  return img;
}

SyntheticDatasets generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticDatasets out;
  out.train.split = Split::train;
  out.val.split = Split::val;
  out.test.split = Split::test;
  out.novel.split = Split::novel;
  auto fill = [&](LabeledDataset& ds, const std::vector<SyntheticClass>& classes, std::size_t count) {
    for (const auto& c : classes) {
      for (std::size_t i = 0; i < count; ++i) {
        std::string id = item_id(ds.split, c.fine, i);
        Image img = render_synthetic(spec, c, id);
        ds.items.push_back({std::move(id), std::move(img), HierarchicalLabel{{c.coarse, c.fine}}});
      }
    }
  };
  fill(out.train, spec.classes, spec.train_per_class);
  fill(out.val, spec.classes, spec.val_per_class);
  fill(out.test, spec.classes, spec.test_per_class);
  fill(out.novel, spec.novel_classes, spec.novel_per_class);
  return out;
}

std::uint64_t image_hash(const Image& image) {
  Fnv1a h;
  const std::uint64_t dims[3] = {image.channels, image.height, image.width};
  h.update(dims, sizeof(dims));
  h.update(image.pixels.data(), image.pixels.size() * sizeof(double));
  return h.digest();
}

std::string dataset_manifest(const std::vector<const LabeledDataset*>& splits, std::uint64_t seed) {
  json doc{{"seed", seed}, {"splits", json::object()}};
  for (const LabeledDataset* ds : splits) {
    json items = json::array();
    for (const auto& item : ds->items) {
      items.push_back({{"id", item.id}, {"label", item.label.path}, {"hash", hex64(image_hash(item.image))}});
    }
    doc["splits"][split_name(ds->split)] = std::move(items);
  }
  return doc.dump(2);
}

void export_dataset(const LabeledDataset& dataset, const std::filesystem::path& root) {
  for (const auto& item : dataset.items) {
    const std::string& fine = item.label.path.back();
    const auto dir = root / fine;
    std::filesystem::create_directories(dir);
    const std::string stem = std::filesystem::path(item.id).filename().string();
    save_png(item.image, dir / (stem + ".png"));
  }
}

}  // namespace hpnet
