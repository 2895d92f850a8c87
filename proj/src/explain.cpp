#include "hpnet/explain.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "hpnet/inference.hpp"

namespace hpnet {

GridPos HeatMap::argmax() const {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return {best / width, best % width};
}

namespace {

// Source coordinate of output index i, with the ratio kept exact when it divides evenly.
double source_coord(std::size_t i, std::size_t in, std::size_t out) {
  if (in == 1 || out == 1) return 0.0;
  return static_cast<double>(i * (in - 1)) / static_cast<double>(out - 1);
}

}  // namespace

HeatMap heat_map(const std::vector<double>& grid, std::size_t h, std::size_t w, std::size_t out_h,
                 std::size_t out_w) {
  if (grid.size() != h * w || h == 0 || w == 0) throw DimensionError("heat_map: grid does not match h x w");
  if (out_h < h || out_w < w) throw std::invalid_argument("heat_map: target smaller than the activation map");
  HeatMap hm;
  hm.height = out_h;
  hm.width = out_w;
  hm.values.resize(out_h * out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    const double sy = source_coord(y, h, out_h);
    const std::size_t y0 = std::min(static_cast<std::size_t>(sy), h - 1), y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - static_cast<double>(y0);
    for (std::size_t x = 0; x < out_w; ++x) {
      const double sx = source_coord(x, w, out_w);
      const std::size_t x0 = std::min(static_cast<std::size_t>(sx), w - 1), x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - static_cast<double>(x0);
      const double g00 = grid[y0 * w + x0], g01 = grid[y0 * w + x1];
      const double g10 = grid[y1 * w + x0], g11 = grid[y1 * w + x1];
      const double top = g00 + fx * (g01 - g00);
      const double bottom = g10 + fx * (g11 - g10);
      const double v = top + fy * (bottom - top);
      hm.values[y * out_w + x] = std::min(v, std::max({g00, g01, g10, g11}));
    }
  }
  const auto [lo, hi] = std::minmax_element(hm.values.begin(), hm.values.end());
  const double mn = *lo, mx = *hi;
  for (double& v : hm.values) v = mx > mn ? (v - mn) / (mx - mn) : 0.5;
  return hm;
}

GridPos upsampled_position(GridPos source, std::size_t h, std::size_t w, std::size_t out_h, std::size_t out_w) {
  auto up = [](std::size_t i, std::size_t in, std::size_t out) -> std::size_t {
    if (in == 1) return 0;
    return static_cast<std::size_t>(
        std::lround(static_cast<double>(i * (out - 1)) / static_cast<double>(in - 1)));
  };
  return {up(source.row, h, out_h), up(source.col, w, out_w)};
}

Explanation explain_prediction(const HpnetModel& model, const Tensor& image, const std::string& image_id,
                               std::size_t top_k, const ProjectionReport* projection) {
  if (image.rank() != 3) throw DimensionError("explain_prediction: expected one [C,H,W] image");
  const Tensor batch({1, image.dim(0), image.dim(1), image.dim(2)}, image.values());
  const Taxonomy& t = model.taxonomy();
  Explanation ex;
  ex.image_id = image_id;
  if (!model.projected()) ex.warnings.push_back("model has not been through a projection; prototypes are not patches");

  NoGradGuard guard;
  const ModelOutput out = forward(model, batch);
  const HierPrediction pred = predict(model, batch).front();
  const std::size_t h = out.latent.dim(2), w = out.latent.dim(3);
  for (std::size_t node : pred.predicted_path) {
    const std::size_t parent = t.node(node).parent;
    const std::size_t li = model.layer_index(parent);
    const PrototypeLayer& layer = model.layers()[li];
    const LayerOutput& lo = out.layers[li];
    const std::size_t c = t.child_index(parent, node), m = layer.num_prototypes();

    LevelExplanation lvl;
    lvl.level = t.node(parent).depth;
    lvl.parent = t.name(parent);
    lvl.predicted = t.name(node);
    lvl.logit = lo.logits[c];
    double total_abs = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      Contribution con;
      con.prototype = j;
      con.prototype_class = t.name(layer.children[layer.allocation[j]]);
      con.score = lo.similarity.scores[j];
      con.weight = layer.fc_weights[c * m + j];
      con.contribution = con.weight * con.score;
      con.position = lo.similarity.argmax[j];
      if (projection) {
        for (const auto& r : projection->records)
          if (r.parent == lvl.parent && r.prototype == j) con.source = r;
      }
      total_abs += std::abs(con.contribution);
      lvl.contributions.push_back(std::move(con));
    }
    std::stable_sort(lvl.contributions.begin(), lvl.contributions.end(),
                     [](const Contribution& a, const Contribution& b) { return a.contribution > b.contribution; });
    for (auto& con : lvl.contributions) con.share = total_abs > 0.0 ? std::abs(con.contribution) / total_abs : 0.0;
    lvl.top_k = std::min(top_k, m);
    const std::size_t hw = h * w;
    for (std::size_t r = 0; r < lvl.top_k; ++r) {
      const std::size_t j = lvl.contributions[r].prototype;
      lvl.top_share += lvl.contributions[r].share;
      const auto maps = lo.similarity.activation_maps.data();
      std::vector<double> grid(maps.begin() + static_cast<long>(j * hw), maps.begin() + static_cast<long>((j + 1) * hw));
      lvl.heat_maps.push_back(heat_map(grid, h, w, image.dim(1), image.dim(2)));
    }
    ex.levels.push_back(std::move(lvl));
  }
  return ex;
}

std::string Explanation::to_json() const {
  nlohmann::ordered_json doc{{"image_id", image_id}, {"levels", nlohmann::ordered_json::array()}};
  for (const auto& lvl : levels) {
    nlohmann::ordered_json top = nlohmann::ordered_json::array();
    for (std::size_t r = 0; r < lvl.top_k; ++r) {
      const auto& c = lvl.contributions[r];
      nlohmann::ordered_json e{{"rank", r + 1},
                               {"prototype", c.prototype},
                               {"prototype_class", c.prototype_class},
                               {"score", c.score},
                               {"weight", c.weight},
                               {"contribution", c.contribution},
                               {"share", c.share},
                               {"patch", {c.position.row, c.position.col}},
                               {"heat_map", std::to_string(lvl.level) + "/" + std::to_string(r + 1) + "_" +
                                                std::to_string(c.prototype) + ".png"}};
      if (c.source) {
        e["source"] = {{"image_id", c.source->image_id}, {"patch", {c.source->position.row, c.source->position.col}}};
      }
      top.push_back(std::move(e));
    }
    double sum = 0.0;
    for (const auto& c : lvl.contributions) sum += c.contribution;
    doc["levels"].push_back({{"level", lvl.level},
                             {"parent", lvl.parent},
                             {"predicted", lvl.predicted},
                             {"logit", lvl.logit},
                             {"contribution_sum", sum},
                             {"top_share", lvl.top_share},
                             {"top", std::move(top)}});
  }
  doc["warnings"] = warnings;
  return doc.dump(2);
}

Image overlay(const Image& image, const HeatMap& heat, double alpha) {
  if (image.height != heat.height || image.width != heat.width) throw DimensionError("overlay: size mismatch");
  Image out(3, image.height, image.width);
  auto ramp = [](double v) { return std::clamp(1.5 - std::abs(v), 0.0, 1.0); };
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t x = 0; x < image.width; ++x) {
      const double t = heat.at(y, x);
      const double color[3] = {ramp(4.0 * t - 3.0), ramp(4.0 * t - 2.0), ramp(4.0 * t - 1.0)};
      for (std::size_t c = 0; c < 3; ++c) {
        const double base = image.at(std::min(c, image.channels - 1), y, x);
        out.at(c, y, x) = (1.0 - alpha) * base + alpha * color[c];
      }
    }
  }
  return out;
}

std::string heat_map_text(const HeatMap& heat) {
  std::string s = std::to_string(heat.height) + " " + std::to_string(heat.width) + "\n";
  char buf[32];
  for (std::size_t r = 0; r < heat.height; ++r) {
    for (std::size_t c = 0; c < heat.width; ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", heat.at(r, c));
      s += buf;
      s += c + 1 < heat.width ? ' ' : '\n';
    }
  }
  return s;
}

HeatMap parse_heat_map_text(const std::string& text) {
  std::istringstream is(text);
  HeatMap hm;
  if (!(is >> hm.height >> hm.width)) throw std::invalid_argument("heat map text: missing header");
  hm.values.resize(hm.height * hm.width);
  for (double& v : hm.values)
    if (!(is >> v)) throw std::invalid_argument("heat map text: truncated grid");
  return hm;
}

std::string path_component(const std::string& id) {
  std::string s = id;
  for (char& ch : s)
    if (ch == '/' || ch == '\\' || ch == ':') ch = '_';
  if (s.empty() || s == "." || s == "..") s = "_" + s;
  return s;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

}  // namespace

void write_explanation(const Explanation& explanation, const Image& image, const std::filesystem::path& root) {
  const auto dir = root / path_component(explanation.image_id);
  for (const auto& lvl : explanation.levels) {
    const auto level_dir = dir / std::to_string(lvl.level);
    std::filesystem::create_directories(level_dir);
    for (std::size_t r = 0; r < lvl.top_k; ++r) {
      const HeatMap& hm = lvl.heat_maps[r];
      const Image base =
          image.height == hm.height && image.width == hm.width ? image : resize_bilinear(image, hm.height, hm.width);
      const std::string stem = std::to_string(r + 1) + "_" + std::to_string(lvl.contributions[r].prototype);
      save_png(overlay(base, hm), level_dir / (stem + ".png"));
      write_text(level_dir / (stem + ".txt"), heat_map_text(hm));
    }
  }
  std::filesystem::create_directories(dir);
  write_text(dir / "explanation.json", explanation.to_json());
}

std::string NeighborList::to_json() const {
  nlohmann::ordered_json doc{{"parent", parent}, {"prototype", prototype}, {"neighbors", nlohmann::ordered_json::array()}};
  for (std::size_t r = 0; r < neighbors.size(); ++r) {
    const auto& n = neighbors[r];
    doc["neighbors"].push_back({{"rank", r + 1},
                                {"image_id", n.image_id},
                                {"patch", {n.position.row, n.position.col}},
                                {"distance", n.distance}});
  }
  doc["warnings"] = warnings;
  return doc.dump(2);
}

NeighborList prototype_neighbors(const HpnetModel& model, const LabeledDataset& dataset, const std::string& parent,
                                 std::size_t prototype, std::size_t k) {
  if (dataset.empty()) throw std::invalid_argument("prototype_neighbors: empty dataset");
  const std::size_t li = model.layer_index(model.taxonomy().index_of(parent));
  const PrototypeLayer& layer = model.layers()[li];
  if (prototype >= layer.num_prototypes()) {
    throw std::out_of_range("prototype " + std::to_string(prototype) + " out of range for parent " + parent);
  }
  NeighborList out;
  out.parent = parent;
  out.prototype = prototype;
  if (k > dataset.size()) {
    out.warnings.push_back("requested " + std::to_string(k) + " neighbors but the dataset has " +
                           std::to_string(dataset.size()) + " images");
    k = dataset.size();
  }
  const auto latents = dataset_latents(model, dataset);
  const std::size_t depth = model.config().backbone.adapter_channels;
  const std::size_t side = model.config().backbone.latent_size();
  const double* p = layer.prototypes.data().data() + prototype * depth;

  std::vector<Neighbor> all;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto [d, pos] = nearest_patch(latents[i].data(), depth, side, side, p);
    all.push_back({dataset.items[i].id, i, pos, d, {}});
  }
  std::stable_sort(all.begin(), all.end(), [](const Neighbor& a, const Neighbor& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.image_id < b.image_id;
  });
  all.resize(k);
  const std::size_t hw = side * side;
  for (auto& n : all) {
    const double* z = latents[n.image_index].data();
    std::vector<double> grid(hw);
    for (std::size_t s = 0; s < hw; ++s) {
      double d = 0.0;
      for (std::size_t c = 0; c < depth; ++c) d += (z[c * hw + s] - p[c]) * (z[c * hw + s] - p[c]);
      grid[s] = std::log1p(1.0 / (d + layer.epsilon));
    }
    const Image& img = dataset.items[n.image_index].image;
    n.heat = heat_map(grid, side, side, img.height, img.width);
  }
  out.neighbors = std::move(all);
  return out;
}

}  // namespace hpnet
