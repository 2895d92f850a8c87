#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hpnet/image.hpp"
#include "hpnet/rng.hpp"
#include "hpnet/taxonomy.hpp"
#include "hpnet/tensor.hpp"

namespace hpnet {

enum class Split { train, val, test, novel };
const char* split_name(Split split);

struct LabeledItem {
  std::string id;  // unique across splits
  Image image;
  HierarchicalLabel label;
};

struct LabeledDataset {
  Split split = Split::train;
  std::vector<LabeledItem> items;

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
  /// Stacks the selected items into [N,C,H,W]. All selected images must share a size.
  Tensor batch(const std::vector<std::size_t>& indices) const;
  Tensor batch(std::size_t begin, std::size_t end) const;
  /// Items whose label passes through the given node name.
  std::vector<std::size_t> indices_under(const std::string& node_name) const;
};

/// Checks every label against the taxonomy; novel splits are checked only
/// at the coarse level. Throws std::invalid_argument naming the first bad item.
void validate_dataset(const LabeledDataset& dataset, const Taxonomy& taxonomy);

struct SplitPolicy {
  std::size_t holdout_per_class = 0;     // takes precedence when > 0
  double holdout_fraction = 50.0 / 1300.0;
};

struct DirectorySplits {
  LabeledDataset train;
  LabeledDataset val;
};

/// Reads root/<leaf-class>/*.png|ppm in sorted path order; the last
/// holdout images of each class go to the validation split.
DirectorySplits load_directory(const std::filesystem::path& root, const Taxonomy& taxonomy,
                               const SplitPolicy& policy = {});
std::size_t holdout_count(std::size_t class_size, const SplitPolicy& policy);

enum class CropMode { train, test };

/// train: random resized crop (area scale [0.5,1], aspect [3/4,4/3]) to out x out.
/// test: resize to round(out*8/7) then center crop out x out.
Image augment_crop(const Image& image, CropMode mode, std::size_t out, Rng& rng);

/// i.i.d. uniform [0,1] pixels of the given [N,C,H,W] shape.
Tensor noise_batch(const Shape& shape, Rng& rng);

enum class ShapeFamily { square, disc, cross, triangle, ring };
const char* shape_family_name(ShapeFamily family);
ShapeFamily parse_shape_family(const std::string& name);

struct SyntheticClass {
  std::string fine;
  std::string coarse;
  ShapeFamily shape = ShapeFamily::square;
  std::array<double, 3> color{1.0, 0.0, 0.0};
};

/// Recipe for a shapes dataset: the coarse class is the shape family and
/// the fine class is a color variant within it.
struct SyntheticSpec {
  std::size_t image_size = 64;
  std::uint64_t seed = 7;
  std::size_t train_per_class = 100;
  std::size_t val_per_class = 20;
  std::size_t test_per_class = 50;
  std::size_t novel_per_class = 60;
  double clutter = 0.12;
  double color_jitter = 0.06;
  std::vector<SyntheticClass> classes;        // in-distribution leaves
  std::vector<SyntheticClass> novel_classes;  // unseen fine classes under known coarse classes

  /// Throws std::invalid_argument on recipe collisions or an unlearnable hierarchy.
  void validate() const;
  /// root -> coarse (first-appearance order) -> fine.
  Taxonomy taxonomy() const;
  std::string to_json() const;
  static SyntheticSpec from_json(const std::string& text);
  static SyntheticSpec load(const std::filesystem::path& path);
};

/// 3 coarse (square, disc, cross) x 2 fine (red, blue), 64x64, 100 train
/// images per class, seed 7; novel fine classes are magenta and white.
SyntheticSpec pinned_synthetic_spec();

struct SyntheticDatasets {
  LabeledDataset train, val, test, novel;
};

SyntheticDatasets generate_synthetic(const SyntheticSpec& spec);
/// Renders one image of a class; deterministic in (spec.seed, id).
Image render_synthetic(const SyntheticSpec& spec, const SyntheticClass& recipe, const std::string& id);

/// JSON manifest: seed plus a content hash per item.
std::string dataset_manifest(const std::vector<const LabeledDataset*>& splits, std::uint64_t seed);
std::uint64_t image_hash(const Image& image);

/// Writes a dataset as root/<fine-class>/<name>.png.
void export_dataset(const LabeledDataset& dataset, const std::filesystem::path& root);

}  // namespace hpnet
