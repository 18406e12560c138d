#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lowkey/face.hpp"
#include "lowkey/nn.hpp"

namespace lowkey::extractors {

enum class Backbone { RN50, RN152, IR50, IR152 };
enum class Head { ArcFace, CosFace };

std::string to_string(Backbone b);
std::string to_string(Head h);
Backbone backbone_from_string(const std::string& s);
Head head_from_string(const std::string& s);

struct ExtractorSpec {
  Backbone backbone = Backbone::IR152;
  Head head = Head::ArcFace;
  std::string weights_uri;
  int embed_dim = 512;
  // Distinguishes several trainings of the same combination.
  std::string tag;

  std::string model_id() const;
  bool operator==(const ExtractorSpec&) const = default;
};

// The eight backbone x head combinations.
std::vector<ExtractorSpec> all_combinations(int embed_dim = 512);

std::vector<nn::LayerDesc> build_backbone(Backbone backbone, int embed_dim);

struct FeatureVector {
  std::vector<float> values;
  std::string model_id;

  std::size_t dim() const noexcept { return values.size(); }
};

double l2_norm(std::span<const float> v);
double l2_distance(std::span<const float> a, std::span<const float> b);
double cosine_similarity(std::span<const float> a, std::span<const float> b);

// A loaded, read-only embedding network.
class FeatureExtractor {
 public:
  FeatureExtractor(ExtractorSpec spec, nn::Network<float> network);

  const ExtractorSpec& spec() const noexcept { return spec_; }
  std::string model_id() const { return spec_.model_id(); }
  const nn::Network<float>& network() const noexcept { return network_; }

  // Raw, unnormalised embedding. Throws ModelContractViolation on a crop that
  // is not 112x112x3 or an output of the wrong dimension.
  FeatureVector extract(const face::AlignedFace& face) const;
  FeatureVector extract_crop(const Tensor<float>& crop) const;

 private:
  ExtractorSpec spec_;
  nn::Network<float> network_;
};

// Weights file: "LKNN" magic, u32 version, u32 header length, JSON header
// (spec + layer list), u64 parameter count, little-endian float32 params.
void save_model(const std::filesystem::path& path, const ExtractorSpec& spec, const nn::Network<float>& net);
FeatureExtractor load_model(const std::string& weights_uri);
std::filesystem::path resolve_uri(const std::string& uri);

struct Ensemble {
  std::vector<ExtractorSpec> members;

  // IR-152 and RN-152, each with ArcFace and CosFace.
  static Ensemble default_members(int embed_dim = 512);
  void validate() const;
};

std::string ensemble_to_json(const Ensemble& e);
Ensemble ensemble_from_json(const std::string& text);
Ensemble read_ensemble(const std::filesystem::path& path);
void write_ensemble(const std::filesystem::path& path, const Ensemble& e);
// Loads every member's weights, resolving relative URIs against `base_dir`.
std::vector<std::shared_ptr<const FeatureExtractor>> load_ensemble(const Ensemble& e,
                                                                   const std::filesystem::path& base_dir = {});

// ---------------------------------------------------------------- heads and losses

struct MarginHeadOutput {
  std::vector<double> logits;
  std::vector<double> cosines;
};

// Cosine logits with the margin applied to the target class only:
// ArcFace s*cos(theta_t + m), CosFace s*(cos(theta_t) - m). `class_weights`
// is row-major C x d. Throws DegenerateEmbedding on a zero-norm embedding.
MarginHeadOutput margin_head_logits(std::span<const float> embedding, std::span<const float> class_weights,
                                    int target, Head head, double margin, double scale);

// Seeds d(loss)/d(logits) back to the embedding and class weights.
void margin_head_backward(std::span<const float> embedding, std::span<const float> class_weights, int target,
                          Head head, double margin, double scale, const MarginHeadOutput& fwd,
                          std::span<const double> grad_logits, std::span<double> grad_embedding,
                          std::span<double> grad_weights);

// -(1 - p_t)^gamma * log(p_t) with p_t the softmax probability of `target`.
double focal_loss(std::span<const double> logits, int target, double gamma);
double focal_loss(std::span<const double> logits, int target, double gamma, std::span<double> grad_logits);

// ---------------------------------------------------------------- training

struct TrainConfig {
  int batch_size = 512;
  int epochs = 120;
  double lr = 0.1;
  std::vector<int> lr_drop_epochs = {35, 65, 95};
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double focal_gamma = 2.0;
  double head_margin = -1;  // < 0 selects the head's default
  double head_scale = 64.0;
  double grad_clip = 0;     // global-norm clip; 0 disables
  bool flip_augment = true;
  int shift_augment = 0;    // random crop translation of up to this many pixels
  std::uint64_t seed = 1;

  // The same schedule compressed to `epochs`, drop epochs scaled in proportion.
  static TrainConfig reduced(int epochs, int batch_size);
  double margin_for(Head head) const;
  double learning_rate_at(int epoch) const;
};

struct LabeledCrop {
  Tensor<float> crop;  // 3 x 112 x 112
  int label = 0;
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0;
  double loss = 0;
  double accuracy = 0;
};

struct TrainResult {
  nn::Network<float> network;
  std::vector<float> head_weights;
  int num_classes = 0;
  std::vector<EpochRecord> log;
};

// Throws InsufficientClasses when fewer than two identities are present.
TrainResult train_extractor(const ExtractorSpec& spec, std::span<const LabeledCrop> data, const TrainConfig& cfg);
TrainResult train_extractor(const ExtractorSpec& spec, nn::Network<float> initial,
                            std::span<const LabeledCrop> data, const TrainConfig& cfg);

std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);
std::string spec_to_json(const ExtractorSpec& spec);
ExtractorSpec spec_from_json(const std::string& text);
std::string train_log_to_json(const std::vector<EpochRecord>& log);

// ---------------------------------------------------------------- feature store

struct FeatureStoreEntry {
  std::vector<float> values;
  std::string label;
  std::string image_id;
};

struct FeatureStore {
  std::string model_id;
  std::uint32_t dim = 0;
  std::vector<FeatureStoreEntry> entries;
};

// "LKFS" magic, u32 version, u32 len + model_id, u32 dim, u64 count, count*dim
// little-endian float32, then per entry u32 len + label, u32 len + image id.
void write_feature_store(const std::filesystem::path& path, const FeatureStore& store);
FeatureStore read_feature_store(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_feature_store(const FeatureStore& store);
FeatureStore decode_feature_store(std::span<const std::uint8_t> bytes);

}  // namespace lowkey::extractors
