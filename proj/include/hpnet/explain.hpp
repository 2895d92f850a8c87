#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hpnet/data.hpp"
#include "hpnet/image.hpp"
#include "hpnet/model.hpp"
#include "hpnet/training.hpp"

namespace hpnet {

struct HeatMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // row-major, in [0,1]

  double at(std::size_t r, std::size_t c) const { return values[r * width + c]; }
  /// First maximum in row-major order.
  GridPos argmax() const;
};

/// Corner-aligned bilinear upsampling of an h x w grid to out_h x out_w,
/// then min-max normalization; a constant grid becomes all 0.5.
HeatMap heat_map(const std::vector<double>& grid, std::size_t h, std::size_t w, std::size_t out_h,
                 std::size_t out_w);
/// Output pixel that a source cell lands on under corner-aligned sampling.
GridPos upsampled_position(GridPos source, std::size_t h, std::size_t w, std::size_t out_h, std::size_t out_w);

struct Contribution {
  std::size_t prototype = 0;
  std::string prototype_class;
  double score = 0.0;
  double weight = 0.0;
  double contribution = 0.0;  // weight * score
  double share = 0.0;         // |contribution| / sum of |contribution| at this level
  GridPos position;           // argmax patch in the latent grid
  std::optional<ProjectionRecord> source;
};

struct LevelExplanation {
  std::size_t level = 0;  // depth of the parent node
  std::string parent;
  std::string predicted;
  double logit = 0.0;
  std::vector<Contribution> contributions;  // every prototype, by signed contribution descending
  std::size_t top_k = 0;                    // leading entries reported as evidence
  double top_share = 0.0;
  std::vector<HeatMap> heat_maps;           // one per top entry
};

struct Explanation {
  std::string image_id;
  std::vector<LevelExplanation> levels;  // parents along the predicted path
  std::vector<std::string> warnings;
  std::string to_json() const;
};

/// image is [C,H,W]. projection, when given, supplies source patches.
Explanation explain_prediction(const HpnetModel& model, const Tensor& image, const std::string& image_id,
                               std::size_t top_k, const ProjectionReport* projection = nullptr);

/// Writes root/<image-id>/<level>/<rank>_<prototype>.png (overlay) and .txt
/// (float grid) for every top entry, plus root/<image-id>/explanation.json.
void write_explanation(const Explanation& explanation, const Image& image, const std::filesystem::path& root);

/// Alpha-blended color ramp of the heat map over the image (same size).
Image overlay(const Image& image, const HeatMap& heat, double alpha = 0.5);
/// "H W" header followed by H rows of W values.
std::string heat_map_text(const HeatMap& heat);
HeatMap parse_heat_map_text(const std::string& text);

struct Neighbor {
  std::string image_id;
  std::size_t image_index = 0;
  GridPos position;
  double distance = 0.0;
  HeatMap heat;
};

struct NeighborList {
  std::string parent;
  std::size_t prototype = 0;
  std::vector<Neighbor> neighbors;  // ascending distance, ties by image id
  std::vector<std::string> warnings;
  std::string to_json() const;
};

NeighborList prototype_neighbors(const HpnetModel& model, const LabeledDataset& dataset, const std::string& parent,
                                 std::size_t prototype, std::size_t k);

/// Safe single path component for an image id.
std::string path_component(const std::string& id);

}  // namespace hpnet
