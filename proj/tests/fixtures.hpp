#pragma once

#include <memory>
#include <string>
#include <vector>

#include "hpnet/data.hpp"
#include "hpnet/model.hpp"
#include "hpnet/ops.hpp"
#include "hpnet/rng.hpp"
#include "hpnet/taxonomy.hpp"

namespace fixtures {

inline hpnet::Tensor random_tensor(const hpnet::Shape& shape, hpnet::Rng& rng, double lo = -1.0,
                                   double hi = 1.0, bool requires_grad = false) {
  std::vector<double> v(hpnet::shape_numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return hpnet::Tensor(shape, std::move(v), requires_grad);
}

// Scalar readout with fixed random weights, so every output element gets a distinct gradient.
inline hpnet::Tensor weighted_sum(const hpnet::Tensor& y, const hpnet::Tensor& weights) {
  return hpnet::sum(hpnet::linear(hpnet::reshape(y, {1, y.numel()}), weights));
}

inline hpnet::Tensor readout_weights(std::size_t n, hpnet::Rng& rng) {
  return random_tensor({1, n}, rng, -1.0, 1.0);
}

constexpr const char* kVehicleAnimal = R"({"name": "root", "children": [
  {"name": "vehicle", "children": [{"name": "ambulance"}, {"name": "pickup"}, {"name": "sports_car"}]},
  {"name": "animal", "children": [{"name": "cat"}, {"name": "dog"}]}
]})";

// root -> {A: {a1, a2}, B: {b1, b2}}
constexpr const char* kTwoParent = R"({"name": "root", "children": [
  {"name": "A", "children": [{"name": "a1"}, {"name": "a2"}]},
  {"name": "B", "children": [{"name": "b1"}, {"name": "b2"}]}
]})";

constexpr const char* kFlatThree = R"({"name": "root", "children": [{"name": "x"}, {"name": "y"}, {"name": "z"}]})";

inline std::shared_ptr<hpnet::Taxonomy> taxonomy(const char* text) {
  return std::make_shared<hpnet::Taxonomy>(hpnet::Taxonomy::parse(text));
}

// 8x8 inputs, one conv stage of 4 channels pooled to a 4x4 grid, D' = 2.
inline hpnet::ModelConfig tiny_config(std::uint64_t seed = 1, std::size_t protos_per_child = 1) {
  hpnet::ModelConfig c;
  c.backbone.input_size = 8;
  c.backbone.stages = {{4, 3, 2}};
  c.backbone.adapter_channels = 2;
  c.prototypes_per_child = protos_per_child;
  c.seed = seed;
  return c;
}

inline hpnet::Image random_image(std::size_t size, hpnet::Rng& rng) {
  hpnet::Image img(3, size, size);
  for (double& p : img.pixels) p = rng.uniform();
  return img;
}

// n random images per leaf, labelled with the full leaf path.
inline hpnet::LabeledDataset random_dataset(const hpnet::Taxonomy& t, std::size_t per_leaf, std::size_t size,
                                            std::uint64_t seed, hpnet::Split split = hpnet::Split::train) {
  hpnet::Rng rng(seed);
  hpnet::LabeledDataset ds;
  ds.split = split;
  for (std::size_t leaf : t.leaves()) {
    for (std::size_t i = 0; i < per_leaf; ++i) {
      ds.items.push_back({t.name(leaf) + "_" + std::to_string(i), random_image(size, rng), t.label_of(leaf)});
    }
  }
  return ds;
}

}  // namespace fixtures
