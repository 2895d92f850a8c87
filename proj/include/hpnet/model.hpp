#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hpnet/ops.hpp"
#include "hpnet/taxonomy.hpp"
#include "hpnet/tensor.hpp"

namespace hpnet {

struct StageConfig {
  std::size_t channels = 16;
  std::size_t kernel = 3;  // odd; "same" padding
  std::size_t pool = 2;    // max-pool window after the stage; 1 = none
};

/// Convolutional feature extractor plus the two 1x1 adapter convolutions.
struct BackboneConfig {
  std::size_t input_channels = 3;
  std::size_t input_size = 64;
  std::vector<StageConfig> stages{{16, 3, 2}, {32, 3, 2}, {64, 3, 2}, {64, 3, 1}};
  std::size_t adapter_channels = 32;  // D'

  std::size_t latent_channels() const { return stages.empty() ? input_channels : stages.back().channels; }
  std::size_t latent_size() const;
  /// Throws std::invalid_argument when D' >= D or the latent grid is below 2x2.
  void validate() const;
};

struct ModelConfig {
  BackboneConfig backbone;
  std::size_t prototypes_per_child = 8;
  double epsilon = 1e-4;
  std::uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
};

/// Prototypes, their child allocation and the evidence (FC) layer of one parent node.
struct PrototypeLayer {
  std::size_t parent = 0;              // taxonomy node
  std::vector<std::size_t> children;   // taxonomy nodes, file order
  Tensor prototypes;                   // [m, D']
  std::vector<std::size_t> allocation; // prototype -> child position
  Tensor fc_weights;                   // [num_children, m]
  double epsilon = 1e-4;

  std::size_t num_prototypes() const { return allocation.size(); }
  std::size_t num_children() const { return children.size(); }
  /// Row-major [num_children, m] mask: true where prototype j belongs to child c.
  std::vector<bool> own_mask() const;
  /// Prototype indices allocated to child position c.
  std::vector<std::size_t> prototypes_of(std::size_t child_pos) const;
};

struct Similarity {
  Tensor distances;        // [N,m,H,W] squared distances
  Tensor activation_maps;  // [N,m,H,W]
  Tensor scores;           // [N,m]
  std::vector<GridPos> argmax;
};

struct LayerOutput {
  Similarity similarity;
  Tensor logits;  // [N, num_children]
};

struct ModelOutput {
  Tensor latent;                    // [N,D',H,W]
  std::vector<LayerOutput> layers;  // aligned with HpnetModel::layers()
};

class HpnetModel {
 public:
  static constexpr std::uint32_t kCheckpointVersion = 1;

  /// Random initialization from config.seed; FC layers get the 1 / -0.5 class-connection init.
  HpnetModel(std::shared_ptr<const Taxonomy> taxonomy, ModelConfig config);

  const Taxonomy& taxonomy() const { return *taxonomy_; }
  std::shared_ptr<const Taxonomy> taxonomy_ptr() const { return taxonomy_; }
  const ModelConfig& config() const { return config_; }

  std::vector<PrototypeLayer>& layers() { return layers_; }
  const std::vector<PrototypeLayer>& layers() const { return layers_; }
  /// Index into layers() for a parent node; throws std::out_of_range.
  std::size_t layer_index(std::size_t parent_node) const;

  struct ConvParams {
    Tensor weight;
    Tensor bias;
  };
  const std::vector<ConvParams>& backbone() const { return backbone_; }
  const std::vector<ConvParams>& adapters() const { return adapters_; }

  /// Stable, ordered names: backbone.<i>.{weight,bias}, adapter.<i>.{weight,bias},
  /// layer.<parent>.{prototypes,fc}.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  Tensor parameter(const std::string& name) const;

  bool projected() const { return projected_; }
  void set_projected(bool flag) { projected_ = flag; }

  /// Hash of the canonical taxonomy text and the config JSON.
  std::uint64_t config_hash() const;
  std::unique_ptr<HpnetModel> clone() const;

 private:
  std::shared_ptr<const Taxonomy> taxonomy_;
  ModelConfig config_;
  std::vector<ConvParams> backbone_;
  std::vector<ConvParams> adapters_;
  std::vector<PrototypeLayer> layers_;
  bool projected_ = false;
};

std::uint64_t config_hash(const Taxonomy& taxonomy, const ModelConfig& config);

/// Backbone + adapters; outputs patch vectors in (0,1)^{D'}.
Tensor forward_latent(const HpnetModel& model, const Tensor& batch);

Similarity similarity_scores(const PrototypeLayer& layer, const Tensor& z);
Tensor parent_logits(const PrototypeLayer& layer, const Tensor& scores);

ModelOutput forward(const HpnetModel& model, const Tensor& batch);

/// Single prototype layer over a flat label set, built directly from weights
/// without any taxonomy bookkeeping.
class PnetModel {
 public:
  PnetModel(std::vector<StageConfig> stages, std::vector<HpnetModel::ConvParams> backbone,
            std::vector<HpnetModel::ConvParams> adapters, Tensor prototypes, Tensor fc_weights,
            double epsilon);
  /// Copies the weights of a model whose taxonomy has a single parent.
  static PnetModel from_flat(const HpnetModel& flat);

  struct Output {
    Tensor scores;
    Tensor logits;
    Tensor probabilities;
  };
  Output forward(const Tensor& batch) const;

 private:
  std::vector<StageConfig> stages_;
  std::vector<HpnetModel::ConvParams> backbone_;
  std::vector<HpnetModel::ConvParams> adapters_;
  Tensor prototypes_;
  Tensor fc_weights_;
  double epsilon_;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Little-endian binary: "HPN1", version, config hash, seed, projected flag,
/// taxonomy text, config JSON, named parameter blobs, trailing FNV-1a checksum.
std::vector<unsigned char> serialize_checkpoint(const HpnetModel& model);
std::unique_ptr<HpnetModel> deserialize_checkpoint(const std::vector<unsigned char>& bytes,
                                                   const Taxonomy* expected_taxonomy = nullptr);

void save_checkpoint(const HpnetModel& model, const std::filesystem::path& path);
/// When expected_taxonomy is given, its hash combined with the stored config
/// must equal the stored config hash.
std::unique_ptr<HpnetModel> load_checkpoint(const std::filesystem::path& path,
                                            const Taxonomy* expected_taxonomy = nullptr);
std::uint64_t file_digest(const std::filesystem::path& path);

}  // namespace hpnet
