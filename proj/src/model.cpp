#include "hpnet/model.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>

#include <json.hpp>

#include "hpnet/hash.hpp"
#include "hpnet/rng.hpp"
#include "hpnet/training.hpp"

namespace hpnet {

using nlohmann::json;

std::size_t BackboneConfig::latent_size() const {
  std::size_t s = input_size;
  for (const auto& st : stages) s /= std::max<std::size_t>(st.pool, 1);
  return s;
}

void BackboneConfig::validate() const {
  if (input_channels == 0 || input_size == 0) throw std::invalid_argument("backbone: empty input");
  for (const auto& st : stages) {
    if (st.channels == 0 || st.kernel == 0 || st.kernel % 2 == 0 || st.pool == 0) {
      throw std::invalid_argument("backbone: stages need positive channels, odd kernels, pool >= 1");
    }
  }
  if (adapter_channels == 0 || adapter_channels >= latent_channels()) {
    throw std::invalid_argument("backbone: adapter channels D'=" + std::to_string(adapter_channels) +
                                " must be positive and below latent channels D=" +
                                std::to_string(latent_channels()));
  }
  if (latent_size() < 2) {
    throw std::invalid_argument("backbone: latent grid " + std::to_string(latent_size()) +
                                "x" + std::to_string(latent_size()) + " is below 2x2");
  }
}

void ModelConfig::validate() const {
  backbone.validate();
  if (prototypes_per_child == 0) throw std::invalid_argument("model: prototypes_per_child must be >= 1");
  if (!(epsilon > 0.0)) throw std::invalid_argument("model: epsilon must be positive");
}

std::string ModelConfig::to_json() const {
  json stages = json::array();
  for (const auto& st : backbone.stages) {
    stages.push_back({{"channels", st.channels}, {"kernel", st.kernel}, {"pool", st.pool}});
  }
  json doc = {{"backbone",
               {{"input_channels", backbone.input_channels},
                {"input_size", backbone.input_size},
                {"stages", stages},
                {"adapter_channels", backbone.adapter_channels}}},
              {"prototypes_per_child", prototypes_per_child},
              {"epsilon", epsilon},
              {"seed", seed}};
  return doc.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  const json doc = json::parse(text);
  ModelConfig c;
  const json& b = doc.at("backbone");
  c.backbone.input_channels = b.at("input_channels").get<std::size_t>();
  c.backbone.input_size = b.at("input_size").get<std::size_t>();
  c.backbone.adapter_channels = b.at("adapter_channels").get<std::size_t>();
  c.backbone.stages.clear();
  for (const auto& st : b.at("stages")) {
    c.backbone.stages.push_back(StageConfig{st.at("channels").get<std::size_t>(),
                                            st.at("kernel").get<std::size_t>(),
                                            st.at("pool").get<std::size_t>()});
  }
  c.prototypes_per_child = doc.value("prototypes_per_child", std::size_t{8});
  c.epsilon = doc.value("epsilon", 1e-4);
  c.seed = doc.value("seed", std::uint64_t{0});
  return c;
}

std::vector<bool> PrototypeLayer::own_mask() const {
  std::vector<bool> mask(num_children() * num_prototypes(), false);
  for (std::size_t j = 0; j < allocation.size(); ++j) mask[allocation[j] * num_prototypes() + j] = true;
  return mask;
}

std::vector<std::size_t> PrototypeLayer::prototypes_of(std::size_t child_pos) const {
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < allocation.size(); ++j)
    if (allocation[j] == child_pos) out.push_back(j);
  return out;
}

namespace {

Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape), true);
  const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (double& v : t.data()) v = sd * rng.normal();
  return t;
}

Tensor copy_param(const Tensor& t) {
  Tensor c = t.detach();
  c.set_requires_grad(true);
  return c;
}

Tensor conv_stack_latent(const std::vector<HpnetModel::ConvParams>& backbone,
                         const std::vector<StageConfig>& stages,
                         const std::vector<HpnetModel::ConvParams>& adapters, const Tensor& batch) {
  Tensor x = batch;
  for (std::size_t i = 0; i < backbone.size(); ++i) {
    const std::size_t pad = stages[i].kernel / 2;
    x = relu(add_channel_bias(conv2d(x, backbone[i].weight, 1, pad), backbone[i].bias));
    if (stages[i].pool > 1) x = max_pool2d(x, stages[i].pool);
  }
  x = relu(add_channel_bias(conv2d(x, adapters[0].weight), adapters[0].bias));
  return sigmoid(add_channel_bias(conv2d(x, adapters[1].weight), adapters[1].bias));
}

}  // namespace

HpnetModel::HpnetModel(std::shared_ptr<const Taxonomy> taxonomy, ModelConfig config)
    : taxonomy_(std::move(taxonomy)), config_(std::move(config)) {
  config_.validate();
  Rng rng(config_.seed);
  const auto& bb = config_.backbone;
  std::size_t in = bb.input_channels;
  for (const auto& st : bb.stages) {
    const std::size_t fan_in = in * st.kernel * st.kernel;
    backbone_.push_back({he_normal({st.channels, in, st.kernel, st.kernel}, fan_in, rng),
                         Tensor({st.channels}, true)});
    in = st.channels;
  }
  const std::size_t d = bb.latent_channels(), dp = bb.adapter_channels;
  adapters_.push_back({he_normal({dp, d, 1, 1}, d, rng), Tensor({dp}, true)});
  adapters_.push_back({he_normal({dp, dp, 1, 1}, dp, rng), Tensor({dp}, true)});

  for (std::size_t parent : taxonomy_->parents()) {
    PrototypeLayer layer;
    layer.parent = parent;
    layer.children = taxonomy_->node(parent).children;
    layer.epsilon = config_.epsilon;
    const std::size_t m = layer.children.size() * config_.prototypes_per_child;
    for (std::size_t c = 0; c < layer.children.size(); ++c)
      for (std::size_t k = 0; k < config_.prototypes_per_child; ++k) layer.allocation.push_back(c);
    layer.prototypes = Tensor({m, dp}, true);
    for (double& v : layer.prototypes.data()) v = rng.uniform();
    layer.fc_weights = Tensor({layer.children.size(), m}, true);
    init_fc(layer);
    layers_.push_back(std::move(layer));
  }
}

std::size_t HpnetModel::layer_index(std::size_t parent_node) const {
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (layers_[i].parent == parent_node) return i;
  throw std::out_of_range("no prototype layer for node " + std::to_string(parent_node));
}

std::vector<std::pair<std::string, Tensor>> HpnetModel::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < backbone_.size(); ++i) {
    out.emplace_back("backbone." + std::to_string(i) + ".weight", backbone_[i].weight);
    out.emplace_back("backbone." + std::to_string(i) + ".bias", backbone_[i].bias);
  }
  for (std::size_t i = 0; i < adapters_.size(); ++i) {
    out.emplace_back("adapter." + std::to_string(i) + ".weight", adapters_[i].weight);
    out.emplace_back("adapter." + std::to_string(i) + ".bias", adapters_[i].bias);
  }
  for (const auto& layer : layers_) {
    const std::string prefix = "layer." + taxonomy_->name(layer.parent);
    out.emplace_back(prefix + ".prototypes", layer.prototypes);
    out.emplace_back(prefix + ".fc", layer.fc_weights);
  }
  return out;
}

Tensor HpnetModel::parameter(const std::string& name) const {
  for (auto& [n, t] : named_parameters())
    if (n == name) return t;
  throw std::out_of_range("unknown parameter " + name);
}

std::uint64_t config_hash(const Taxonomy& taxonomy, const ModelConfig& config) {
  Fnv1a h;
  h.update(taxonomy.canonical_text());
  h.update("\n");
  h.update(config.to_json());
  return h.digest();
}

std::uint64_t HpnetModel::config_hash() const { return hpnet::config_hash(*taxonomy_, config_); }

std::unique_ptr<HpnetModel> HpnetModel::clone() const {
  auto copy = std::make_unique<HpnetModel>(*this);
  for (auto& p : copy->backbone_) {
    p.weight = copy_param(p.weight);
    p.bias = copy_param(p.bias);
  }
  for (auto& p : copy->adapters_) {
    p.weight = copy_param(p.weight);
    p.bias = copy_param(p.bias);
  }
  for (auto& layer : copy->layers_) {
    layer.prototypes = copy_param(layer.prototypes);
    layer.fc_weights = copy_param(layer.fc_weights);
  }
  return copy;
}

Tensor forward_latent(const HpnetModel& model, const Tensor& batch) {
  const auto& bb = model.config().backbone;
  if (batch.rank() != 4 || batch.dim(1) != bb.input_channels || batch.dim(2) != bb.input_size ||
      batch.dim(3) != bb.input_size) {
    throw DimensionError("forward_latent: batch shape " + shape_str(batch.shape()) +
                         " does not match [N," + std::to_string(bb.input_channels) + "," +
                         std::to_string(bb.input_size) + "," + std::to_string(bb.input_size) + "]");
  }
  return conv_stack_latent(model.backbone(), bb.stages, model.adapters(), batch);
}

Similarity similarity_scores(const PrototypeLayer& layer, const Tensor& z) {
  Similarity s;
  s.distances = squared_distances(z, layer.prototypes);
  s.activation_maps = log_similarity(s.distances, layer.epsilon);
  SpatialMax mx = spatial_max(s.activation_maps);
  s.scores = std::move(mx.values);
  s.argmax = std::move(mx.argmax);
  return s;
}

Tensor parent_logits(const PrototypeLayer& layer, const Tensor& scores) {
  return linear(scores, layer.fc_weights);
}

ModelOutput forward(const HpnetModel& model, const Tensor& batch) {
  ModelOutput out;
  out.latent = forward_latent(model, batch);
  for (const auto& layer : model.layers()) {
    LayerOutput lo;
    lo.similarity = similarity_scores(layer, out.latent);
    lo.logits = parent_logits(layer, lo.similarity.scores);
    out.layers.push_back(std::move(lo));
  }
  return out;
}

PnetModel::PnetModel(std::vector<StageConfig> stages, std::vector<HpnetModel::ConvParams> backbone,
                     std::vector<HpnetModel::ConvParams> adapters, Tensor prototypes,
                     Tensor fc_weights, double epsilon)
    : stages_(std::move(stages)),
      backbone_(std::move(backbone)),
      adapters_(std::move(adapters)),
      prototypes_(std::move(prototypes)),
      fc_weights_(std::move(fc_weights)),
      epsilon_(epsilon) {}

PnetModel PnetModel::from_flat(const HpnetModel& flat) {
  if (flat.layers().size() != 1) {
    throw std::invalid_argument("PnetModel::from_flat: taxonomy has " +
                                std::to_string(flat.layers().size()) + " parent nodes, expected 1");
  }
  auto copy_conv = [](const std::vector<HpnetModel::ConvParams>& src) {
    std::vector<HpnetModel::ConvParams> out;
    for (const auto& p : src) out.push_back({p.weight.detach(), p.bias.detach()});
    return out;
  };
  return PnetModel(flat.config().backbone.stages, copy_conv(flat.backbone()),
                   copy_conv(flat.adapters()), flat.layers()[0].prototypes.detach(),
                   flat.layers()[0].fc_weights.detach(), flat.layers()[0].epsilon);
}

PnetModel::Output PnetModel::forward(const Tensor& batch) const {
  NoGradGuard guard;
  const Tensor z = conv_stack_latent(backbone_, stages_, adapters_, batch);
  const std::size_t n = z.dim(0), d = z.dim(1), hw = z.dim(2) * z.dim(3);
  const std::size_t m = prototypes_.dim(0), classes = fc_weights_.dim(0);
  Output out{Tensor({n, m}), Tensor({n, classes}), Tensor({n, classes})};
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t j = 0; j < m; ++j) {
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t s = 0; s < hw; ++s) {
        double dist = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          const double diff = z[(b * d + k) * hw + s] - prototypes_[j * d + k];
          dist += diff * diff;
        }
        best = std::max(best, std::log1p(1.0 / (dist + epsilon_)));
      }
      out.scores[b * m + j] = best;
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < classes; ++c) {
      double logit = 0.0;
      for (std::size_t j = 0; j < m; ++j) logit += fc_weights_[c * m + j] * out.scores[b * m + j];
      out.logits[b * classes + c] = logit;
      mx = std::max(mx, logit);
    }
    double total = 0.0;
    for (std::size_t c = 0; c < classes; ++c) total += std::exp(out.logits[b * classes + c] - mx);
    for (std::size_t c = 0; c < classes; ++c)
      out.probabilities[b * classes + c] = std::exp(out.logits[b * classes + c] - mx) / total;
  }
  return out;
}

// ---- checkpoint -------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'H', 'P', 'N', '1'};

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<unsigned char>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str32(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void str64(const std::string& s) {
    u64(s.size());
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  std::vector<unsigned char>& bytes() { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class Reader {
 public:
  Reader(const std::vector<unsigned char>& bytes, std::size_t end) : bytes_(bytes), end_(end) {}
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw CheckpointError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(bytes_.begin() + static_cast<long>(pos_), bytes_.begin() + static_cast<long>(pos_ + n));
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<unsigned char>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<unsigned char> serialize_checkpoint(const HpnetModel& model) {
  Writer w;
  for (char c : kMagic) w.u8(static_cast<std::uint8_t>(c));
  w.u32(HpnetModel::kCheckpointVersion);
  w.u64(model.config_hash());
  w.u64(model.config().seed);
  w.u8(model.projected() ? 1 : 0);
  w.str64(model.taxonomy().canonical_text());
  w.str64(model.config().to_json());
  const auto params = model.named_parameters();
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    w.str32(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u64(d);
    for (double v : t.data()) {
      if (!std::isfinite(v)) throw NumericError("save_checkpoint: parameter " + name + " is not finite");
      w.f64(v);
    }
  }
  Fnv1a h;
  h.update(w.bytes().data(), w.bytes().size());
  w.u64(h.digest());
  return std::move(w.bytes());
}

std::unique_ptr<HpnetModel> deserialize_checkpoint(const std::vector<unsigned char>& bytes,
                                                   const Taxonomy* expected_taxonomy) {
  if (bytes.size() < 4 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
    throw CheckpointError("checkpoint: bad magic bytes");
  }
  if (bytes.size() < 12) throw CheckpointError("checkpoint truncated in header");
  const std::size_t body = bytes.size() - 8;
  Reader r(bytes, bytes.size());
  r.str(4);
  const std::uint32_t version = r.u32();
  if (version != HpnetModel::kCheckpointVersion) {
    throw CheckpointError("checkpoint: version " + std::to_string(version) + " unsupported (expected " +
                          std::to_string(HpnetModel::kCheckpointVersion) + ")");
  }
  const std::uint64_t stored_hash = r.u64();
  r.u64();  // seed; duplicated inside the config JSON
  const bool projected = r.u8() != 0;
  const std::string taxonomy_text = r.str(r.u64());
  const std::string config_text = r.str(r.u64());

  auto taxonomy = std::make_shared<const Taxonomy>(Taxonomy::parse(taxonomy_text));
  const ModelConfig config = ModelConfig::from_json(config_text);
  if (hpnet::config_hash(*taxonomy, config) != stored_hash) {
    throw CheckpointError("checkpoint: config hash does not match stored taxonomy/config");
  }
  if (expected_taxonomy && hpnet::config_hash(*expected_taxonomy, config) != stored_hash) {
    throw CheckpointError("checkpoint: config-hash mismatch; checkpoint was built for a different taxonomy");
  }

  auto model = std::make_unique<HpnetModel>(taxonomy, config);
  auto params = model->named_parameters();
  const std::uint32_t count = r.u32();
  if (count != params.size()) throw CheckpointError("checkpoint: parameter count mismatch");
  for (auto& [name, t] : params) {
    const std::string stored_name = r.str(r.u32());
    if (stored_name != name) throw CheckpointError("checkpoint: expected parameter " + name + ", found " + stored_name);
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u64();
    if (shape != t.shape()) throw CheckpointError("checkpoint: shape mismatch for " + name);
    for (double& v : t.data()) v = r.f64();
  }
  if (r.pos() != body) throw CheckpointError("checkpoint: trailing bytes or truncation");
  Fnv1a h;
  h.update(bytes.data(), body);
  if (r.u64() != h.digest()) throw CheckpointError("checkpoint: checksum mismatch");
  model->set_projected(projected);
  return model;
}

void save_checkpoint(const HpnetModel& model, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

namespace {
std::vector<unsigned char> read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}
}  // namespace

std::unique_ptr<HpnetModel> load_checkpoint(const std::filesystem::path& path,
                                            const Taxonomy* expected_taxonomy) {
  return deserialize_checkpoint(read_all(path), expected_taxonomy);
}

std::uint64_t file_digest(const std::filesystem::path& path) {
  const auto bytes = read_all(path);
  Fnv1a h;
  h.update(bytes.data(), bytes.size());
  return h.digest();
}

}  // namespace hpnet
