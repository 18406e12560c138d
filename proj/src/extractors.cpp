#include "lowkey/extractors.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include <json.hpp>

#include "binary_io.hpp"
#include "lowkey/error.hpp"
#include "lowkey/imaging.hpp"

namespace lowkey::extractors {

using nlohmann::json;

std::string to_string(Backbone b) {
  switch (b) {
    case Backbone::RN50: return "RN50";
    case Backbone::RN152: return "RN152";
    case Backbone::IR50: return "IR50";
    case Backbone::IR152: return "IR152";
  }
  return "?";
}

std::string to_string(Head h) { return h == Head::ArcFace ? "ArcFace" : "CosFace"; }

Backbone backbone_from_string(const std::string& s) {
  for (Backbone b : {Backbone::RN50, Backbone::RN152, Backbone::IR50, Backbone::IR152})
    if (to_string(b) == s) return b;
  fail(ErrorCode::ConfigError, "unknown backbone '" + s + "'");
}

Head head_from_string(const std::string& s) {
  if (s == "ArcFace") return Head::ArcFace;
  if (s == "CosFace") return Head::CosFace;
  fail(ErrorCode::ConfigError, "unknown head '" + s + "'");
}

std::string ExtractorSpec::model_id() const {
  std::string id = to_string(backbone) + "-" + to_string(head);
  if (!tag.empty()) id += "-" + tag;
  return id;
}

std::vector<ExtractorSpec> all_combinations(int embed_dim) {
  std::vector<ExtractorSpec> out;
  for (Backbone b : {Backbone::RN50, Backbone::RN152, Backbone::IR50, Backbone::IR152})
    for (Head h : {Head::ArcFace, Head::CosFace}) out.push_back({b, h, "", embed_dim, ""});
  return out;
}

namespace {

nn::LayerDesc conv(int in, int out, int stride, double gain = 1.0) {
  nn::LayerDesc l;
  l.kind = nn::LayerKind::Conv;
  l.in_channels = in;
  l.out_channels = out;
  l.kernel = 3;
  l.stride = stride;
  l.pad = 1;
  l.init_gain = gain;
  return l;
}

nn::LayerDesc simple(nn::LayerKind kind, int channels = 0, double gain = 1.0) {
  nn::LayerDesc l;
  l.kind = kind;
  l.in_channels = channels;
  l.out_channels = channels;
  l.init_gain = gain;
  return l;
}

}  // namespace

// Desk-scale backbones. IR variants use pre-activation blocks with PReLU and
// channel affines; RN variants use post-activation basic blocks with ReLU.
// The 152 variants stack two blocks per stage, the 50 variants one.
std::vector<nn::LayerDesc> build_backbone(Backbone backbone, int embed_dim) {
  const bool ir = backbone == Backbone::IR50 || backbone == Backbone::IR152;
  const int blocks = (backbone == Backbone::RN152 || backbone == Backbone::IR152) ? 2 : 1;
  constexpr int widths[3] = {8, 16, 32};
  const auto act = [&](int c) { return simple(ir ? nn::LayerKind::PReLU : nn::LayerKind::ReLU, c); };

  std::vector<nn::LayerDesc> layers;
  layers.push_back(simple(nn::LayerKind::InputNorm));
  nn::LayerDesc pool = simple(nn::LayerKind::AvgPool);
  pool.kernel = 2;
  pool.stride = 2;
  layers.push_back(pool);
  layers.push_back(conv(3, widths[0], 2));
  layers.push_back(act(widths[0]));
  for (int stage = 0; stage < 3; ++stage) {
    const int c = widths[stage];
    if (stage > 0) {
      layers.push_back(conv(widths[stage - 1], c, 2));
      layers.push_back(act(c));
    }
    for (int b = 0; b < blocks; ++b) {
      layers.push_back(simple(nn::LayerKind::SkipSave));
      if (ir) {
        layers.push_back(simple(nn::LayerKind::Affine, c));
        layers.push_back(conv(c, c, 1));
        layers.push_back(act(c));
        layers.push_back(conv(c, c, 1, 0.5));
        layers.push_back(simple(nn::LayerKind::Affine, c));
        layers.push_back(simple(nn::LayerKind::SkipAdd));
      } else {
        layers.push_back(conv(c, c, 1));
        layers.push_back(simple(nn::LayerKind::ReLU));
        layers.push_back(conv(c, c, 1, 0.5));
        layers.push_back(simple(nn::LayerKind::SkipAdd));
        layers.push_back(simple(nn::LayerKind::ReLU));
      }
    }
  }
  nn::LayerDesc fc;
  fc.kind = nn::LayerKind::Linear;
  fc.in_features = widths[2] * 7 * 7;
  fc.out_features = embed_dim;
  layers.push_back(fc);
  layers.push_back(simple(nn::LayerKind::Affine, embed_dim));
  return layers;
}

double l2_norm(std::span<const float> v) {
  double acc = 0;
  for (float x : v) acc += static_cast<double>(x) * x;
  return std::sqrt(acc);
}

double l2_distance(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) fail(ErrorCode::ShapeMismatch, "feature dimension mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return std::sqrt(acc);
}

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) fail(ErrorCode::ShapeMismatch, "feature dimension mismatch");
  double dot = 0;
  for (std::size_t i = 0; i < a.size(); ++i) dot += static_cast<double>(a[i]) * b[i];
  const double na = l2_norm(a), nb = l2_norm(b);
  if (na == 0 || nb == 0) return 0;
  return dot / (na * nb);
}

FeatureExtractor::FeatureExtractor(ExtractorSpec spec, nn::Network<float> network)
    : spec_(std::move(spec)), network_(std::move(network)) {}

FeatureVector FeatureExtractor::extract_crop(const Tensor<float>& crop) const {
  if (crop.channels() != 3 || crop.height() != face::kCropSize || crop.width() != face::kCropSize)
    fail(ErrorCode::ModelContractViolation, "extractor input must be 3x112x112");
  Tensor<float> out = network_.forward(crop);
  if (static_cast<int>(out.size()) != spec_.embed_dim)
    fail(ErrorCode::ModelContractViolation, model_id() + " produced " + std::to_string(out.size()) +
                                                "-d output, declared " + std::to_string(spec_.embed_dim));
  FeatureVector fv;
  fv.values.assign(out.values().begin(), out.values().end());
  fv.model_id = model_id();
  return fv;
}

FeatureVector FeatureExtractor::extract(const face::AlignedFace& face) const {
  return extract_crop(face.crop.tensor());
}

// ---------------------------------------------------------------- JSON

namespace {

json layer_to_json(const nn::LayerDesc& l) {
  return {{"kind", nn::to_string(l.kind)}, {"in_channels", l.in_channels}, {"out_channels", l.out_channels},
          {"kernel", l.kernel},           {"stride", l.stride},           {"pad", l.pad},
          {"in_features", l.in_features}, {"out_features", l.out_features}, {"init_gain", l.init_gain}};
}

nn::LayerDesc layer_from_json(const json& j) {
  nn::LayerDesc l;
  l.kind = nn::layer_kind_from_string(j.at("kind").get<std::string>());
  l.in_channels = j.value("in_channels", 0);
  l.out_channels = j.value("out_channels", 0);
  l.kernel = j.value("kernel", 1);
  l.stride = j.value("stride", 1);
  l.pad = j.value("pad", 0);
  l.in_features = j.value("in_features", 0);
  l.out_features = j.value("out_features", 0);
  l.init_gain = j.value("init_gain", 1.0);
  return l;
}

json spec_json(const ExtractorSpec& s) {
  return {{"backbone", to_string(s.backbone)},
          {"head", to_string(s.head)},
          {"weights_uri", s.weights_uri},
          {"embed_dim", s.embed_dim},
          {"tag", s.tag}};
}

ExtractorSpec spec_parse(const json& j) {
  ExtractorSpec s;
  s.backbone = backbone_from_string(j.at("backbone").get<std::string>());
  s.head = head_from_string(j.at("head").get<std::string>());
  s.weights_uri = j.value("weights_uri", "");
  s.embed_dim = j.value("embed_dim", 512);
  s.tag = j.value("tag", "");
  if (s.embed_dim < 1) fail(ErrorCode::ConfigError, "embed_dim must be positive");
  return s;
}

json parse_json(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, std::string("malformed JSON: ") + e.what());
  }
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out << text;
}

}  // namespace

std::string spec_to_json(const ExtractorSpec& spec) { return spec_json(spec).dump(2); }

ExtractorSpec spec_from_json(const std::string& text) {
  try {
    return spec_parse(parse_json(text));
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, std::string("bad extractor spec: ") + e.what());
  }
}

std::filesystem::path resolve_uri(const std::string& uri) {
  constexpr std::string_view kFile = "file://";
  if (uri.rfind(kFile, 0) == 0) return std::filesystem::path(uri.substr(kFile.size()));
  if (uri.find("://") != std::string::npos) fail(ErrorCode::ConfigError, "unsupported weights URI scheme: " + uri);
  return std::filesystem::path(uri);
}

void save_model(const std::filesystem::path& path, const ExtractorSpec& spec, const nn::Network<float>& net) {
  json header;
  header["spec"] = spec_json(spec);
  header["layers"] = json::array();
  for (const auto& l : net.layers()) header["layers"].push_back(layer_to_json(l));
  const std::string text = header.dump();
  detail::ByteWriter w;
  w.raw("LKNN");
  w.u32(1);
  w.str(text);
  w.u64(net.param_count());
  for (float v : net.params()) w.f32(v);
  imaging::write_bytes(path, w.take());
}

FeatureExtractor load_model(const std::string& weights_uri) {
  const auto bytes = imaging::read_bytes(resolve_uri(weights_uri));
  detail::ByteReader r(bytes);
  if (r.raw(4) != "LKNN") fail(ErrorCode::DecodeError, "not a weights file: " + weights_uri);
  if (r.u32() != 1) fail(ErrorCode::DecodeError, "unsupported weights version");
  json header = parse_json(r.str());
  ExtractorSpec spec;
  std::vector<nn::LayerDesc> layers;
  try {
    spec = spec_parse(header.at("spec"));
    for (const auto& jl : header.at("layers")) layers.push_back(layer_from_json(jl));
  } catch (const json::exception& e) {
    fail(ErrorCode::DecodeError, std::string("bad weights header: ") + e.what());
  }
  spec.weights_uri = weights_uri;
  nn::Network<float> net(layers);
  const std::uint64_t count = r.u64();
  if (count != net.param_count()) fail(ErrorCode::ModelContractViolation, "parameter count mismatch");
  for (float& v : net.params()) v = r.f32();
  return FeatureExtractor(std::move(spec), std::move(net));
}

Ensemble Ensemble::default_members(int embed_dim) {
  return {{{Backbone::IR152, Head::ArcFace, "", embed_dim, ""},
           {Backbone::IR152, Head::CosFace, "", embed_dim, ""},
           {Backbone::RN152, Head::ArcFace, "", embed_dim, ""},
           {Backbone::RN152, Head::CosFace, "", embed_dim, ""}}};
}

void Ensemble::validate() const {
  if (members.empty()) fail(ErrorCode::ConfigError, "ensemble must have at least one member");
  std::vector<std::string> ids;
  for (const auto& m : members) ids.push_back(m.model_id());
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
    fail(ErrorCode::ConfigError, "ensemble member model ids must be unique");
}

std::string ensemble_to_json(const Ensemble& e) {
  json j;
  j["members"] = json::array();
  for (const auto& m : e.members) j["members"].push_back(spec_json(m));
  return j.dump(2);
}

Ensemble ensemble_from_json(const std::string& text) {
  const json j = parse_json(text);
  Ensemble e;
  try {
    for (const auto& m : j.at("members")) e.members.push_back(spec_parse(m));
  } catch (const json::exception& ex) {
    fail(ErrorCode::ConfigError, std::string("bad ensemble registry: ") + ex.what());
  }
  e.validate();
  return e;
}

Ensemble read_ensemble(const std::filesystem::path& path) { return ensemble_from_json(read_text(path)); }
void write_ensemble(const std::filesystem::path& path, const Ensemble& e) { write_text(path, ensemble_to_json(e)); }

std::vector<std::shared_ptr<const FeatureExtractor>> load_ensemble(const Ensemble& e,
                                                                   const std::filesystem::path& base_dir) {
  e.validate();
  std::vector<std::shared_ptr<const FeatureExtractor>> out;
  for (const auto& m : e.members) {
    std::string uri = m.weights_uri;
    std::filesystem::path p = resolve_uri(uri);
    if (p.is_relative() && !base_dir.empty()) uri = (base_dir / p).string();
    auto model = std::make_shared<FeatureExtractor>(load_model(uri));
    if (model->spec().backbone != m.backbone || model->spec().head != m.head || model->spec().embed_dim != m.embed_dim)
      fail(ErrorCode::ModelContractViolation, "weights at " + uri + " do not match registry entry " + m.model_id());
    out.push_back(std::move(model));
  }
  return out;
}

// ---------------------------------------------------------------- heads

namespace {

double head_default_margin(Head h) { return h == Head::ArcFace ? 0.5 : 0.35; }

// Target-class margin function and its derivative with respect to cos(theta).
std::pair<double, double> target_margin(Head head, double c, double m) {
  if (head == Head::CosFace) return {c - m, 1.0};
  const double theta = std::acos(std::clamp(c, -1.0, 1.0));
  if (theta + m <= M_PI) {
    const double s = std::sqrt(std::max(1.0 - c * c, 1e-12));
    return {std::cos(theta + m), std::cos(m) + c * std::sin(m) / s};
  }
  // Past pi the angular margin stops being monotone; fall back to a linear penalty.
  return {c - m * std::sin(m), 1.0};
}

}  // namespace

MarginHeadOutput margin_head_logits(std::span<const float> embedding, std::span<const float> class_weights,
                                    int target, Head head, double margin, double scale) {
  const std::size_t d = embedding.size();
  if (d == 0 || class_weights.size() % d != 0) fail(ErrorCode::ShapeMismatch, "class weights must be C x d");
  const std::size_t classes = class_weights.size() / d;
  if (target < 0 || static_cast<std::size_t>(target) >= classes) fail(ErrorCode::ConfigError, "target out of range");
  const double en = l2_norm(embedding);
  if (!(en > 0)) fail(ErrorCode::DegenerateEmbedding, "embedding has zero norm");
  MarginHeadOutput out;
  out.cosines.resize(classes);
  out.logits.resize(classes);
  for (std::size_t j = 0; j < classes; ++j) {
    const auto row = class_weights.subspan(j * d, d);
    const double wn = l2_norm(row);
    if (!(wn > 0)) fail(ErrorCode::DegenerateEmbedding, "class weight has zero norm");
    double dot = 0;
    for (std::size_t k = 0; k < d; ++k) dot += static_cast<double>(embedding[k]) * row[k];
    const double c = std::clamp(dot / (en * wn), -1.0, 1.0);
    out.cosines[j] = c;
    out.logits[j] = scale * c;
  }
  out.logits[target] = scale * target_margin(head, out.cosines[target], margin).first;
  return out;
}

void margin_head_backward(std::span<const float> embedding, std::span<const float> class_weights, int target,
                          Head head, double margin, double scale, const MarginHeadOutput& fwd,
                          std::span<const double> grad_logits, std::span<double> grad_embedding,
                          std::span<double> grad_weights) {
  const std::size_t d = embedding.size();
  const std::size_t classes = fwd.cosines.size();
  const double en = l2_norm(embedding);
  for (std::size_t j = 0; j < classes; ++j) {
    double dc = scale * grad_logits[j];
    if (static_cast<int>(j) == target) dc *= target_margin(head, fwd.cosines[j], margin).second;
    if (dc == 0) continue;
    const auto row = class_weights.subspan(j * d, d);
    const double wn = l2_norm(row);
    const double c = fwd.cosines[j];
    for (std::size_t k = 0; k < d; ++k) {
      grad_embedding[k] += dc * (row[k] / (en * wn) - c * embedding[k] / (en * en));
      if (!grad_weights.empty()) grad_weights[j * d + k] += dc * (embedding[k] / (en * wn) - c * row[k] / (wn * wn));
    }
  }
}

double focal_loss(std::span<const double> logits, int target, double gamma) {
  std::vector<double> scratch(logits.size());
  return focal_loss(logits, target, gamma, scratch);
}

double focal_loss(std::span<const double> logits, int target, double gamma, std::span<double> grad_logits) {
  const std::size_t n = logits.size();
  if (n < 2) fail(ErrorCode::ConfigError, "focal loss needs at least two classes");
  if (target < 0 || static_cast<std::size_t>(target) >= n) fail(ErrorCode::ConfigError, "target out of range");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> prob(n);
  double z = 0;
  for (std::size_t j = 0; j < n; ++j) z += (prob[j] = std::exp(logits[j] - mx));
  for (double& p : prob) p /= z;
  const double log_pt = logits[target] - mx - std::log(z);
  const double pt = prob[target];
  const double one_minus = std::max(0.0, 1.0 - pt);
  const double loss = -std::pow(one_minus, gamma) * log_pt;
  if (!grad_logits.empty()) {
    // dL/dz_j = [gamma (1-p)^(gamma-1) p log p - (1-p)^gamma] (delta_tj - p_j)
    const double pow_gm1 = gamma == 0 ? 0.0 : gamma * std::pow(one_minus, gamma - 1) * pt * log_pt;
    const double coeff = pow_gm1 - std::pow(one_minus, gamma);
    for (std::size_t j = 0; j < n; ++j)
      grad_logits[j] = coeff * ((static_cast<int>(j) == target ? 1.0 : 0.0) - prob[j]);
  }
  return std::max(0.0, loss);
}

// ---------------------------------------------------------------- training

TrainConfig TrainConfig::reduced(int epochs, int batch_size) {
  TrainConfig cfg;
  const TrainConfig full;
  cfg.epochs = epochs;
  cfg.batch_size = batch_size;
  cfg.lr_drop_epochs.clear();
  for (int d : full.lr_drop_epochs)
    cfg.lr_drop_epochs.push_back(static_cast<int>(std::lround(static_cast<double>(d) * epochs / full.epochs)));
  return cfg;
}

double TrainConfig::margin_for(Head head) const { return head_margin >= 0 ? head_margin : head_default_margin(head); }

double TrainConfig::learning_rate_at(int epoch) const {
  double rate = lr;
  for (int d : lr_drop_epochs)
    if (epoch >= d) rate *= 0.1;
  return rate;
}

TrainResult train_extractor(const ExtractorSpec& spec, std::span<const LabeledCrop> data, const TrainConfig& cfg) {
  nn::Network<float> net(build_backbone(spec.backbone, spec.embed_dim));
  std::uint64_t seed = cfg.seed;
  for (char ch : spec.model_id()) seed = seed * 1099511628211ULL + static_cast<unsigned char>(ch);
  net.initialize(seed);
  return train_extractor(spec, std::move(net), data, cfg);
}

TrainResult train_extractor(const ExtractorSpec& spec, nn::Network<float> initial, std::span<const LabeledCrop> data,
                            const TrainConfig& cfg) {
  int num_classes = 0;
  std::vector<int> seen;
  for (const auto& s : data) {
    if (s.label < 0) fail(ErrorCode::ConfigError, "negative identity label");
    num_classes = std::max(num_classes, s.label + 1);
    seen.push_back(s.label);
  }
  std::sort(seen.begin(), seen.end());
  seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
  if (seen.size() < 2) fail(ErrorCode::InsufficientClasses, "training needs at least two identities");
  if (cfg.batch_size < 1 || cfg.epochs < 0) fail(ErrorCode::ConfigError, "invalid batch size or epoch count");

  TrainResult result;
  result.network = std::move(initial);
  result.num_classes = num_classes;
  const std::size_t d = static_cast<std::size_t>(spec.embed_dim);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal(0.0, 1.0);
  result.head_weights.resize(d * num_classes);
  for (float& w : result.head_weights) w = static_cast<float>(normal(rng) / std::sqrt(static_cast<double>(d)));
  if (cfg.epochs == 0) return result;

  nn::Network<float>& net = result.network;
  const double margin = cfg.margin_for(spec.head);
  std::vector<float> grad(net.param_count());
  std::vector<double> head_grad(result.head_weights.size());
  std::vector<float> velocity(net.param_count(), 0.0f);
  std::vector<double> head_velocity(result.head_weights.size(), 0.0);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  nn::Network<float>::Tape tape;
  std::vector<double> grad_logits(num_classes);
  std::vector<double> grad_emb(d);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cfg.learning_rate_at(epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    int correct = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::fill(grad.begin(), grad.end(), 0.0f);
      std::fill(head_grad.begin(), head_grad.end(), 0.0);
      for (std::size_t bi = start; bi < end; ++bi) {
        const LabeledCrop& sample = data[order[bi]];
        Tensor<float> input = sample.crop;
        if (cfg.flip_augment && (rng() & 1)) {
          for (int c = 0; c < input.channels(); ++c)
            for (int y = 0; y < input.height(); ++y)
              std::reverse(&input.at(c, y, 0), &input.at(c, y, 0) + input.width());
        }
        if (cfg.shift_augment > 0) {
          std::uniform_int_distribution<int> shift(-cfg.shift_augment, cfg.shift_augment);
          const int dx = shift(rng), dy = shift(rng);
          if (dx || dy) {
            const Tensor<float> src = input;
            const int ih = input.height(), iw = input.width();
            for (int c = 0; c < input.channels(); ++c)
              for (int y = 0; y < ih; ++y)
                for (int x = 0; x < iw; ++x)
                  input.at(c, y, x) = src.at(c, std::clamp(y + dy, 0, ih - 1), std::clamp(x + dx, 0, iw - 1));
          }
        }
        const Tensor<float> emb = net.forward(input, &tape);
        const auto head = margin_head_logits(emb.values(), result.head_weights, sample.label, spec.head, margin,
                                             cfg.head_scale);
        loss_sum += focal_loss(head.logits, sample.label, cfg.focal_gamma, grad_logits);
        if (std::max_element(head.cosines.begin(), head.cosines.end()) - head.cosines.begin() == sample.label)
          ++correct;
        std::fill(grad_emb.begin(), grad_emb.end(), 0.0);
        margin_head_backward(emb.values(), result.head_weights, sample.label, spec.head, margin, cfg.head_scale, head,
                             grad_logits, grad_emb, head_grad);
        Tensor<float> g(emb.channels(), emb.height(), emb.width());
        for (std::size_t k = 0; k < d; ++k) g[k] = static_cast<float>(grad_emb[k]);
        net.backward(tape, g, grad, false);
      }
      const double inv = 1.0 / static_cast<double>(end - start);
      double norm_sq = 0;
      for (float& v : grad) {
        v = static_cast<float>(v * inv);
        norm_sq += static_cast<double>(v) * v;
      }
      for (double& v : head_grad) {
        v *= inv;
        norm_sq += v * v;
      }
      double clip = 1.0;
      if (cfg.grad_clip > 0 && std::sqrt(norm_sq) > cfg.grad_clip) clip = cfg.grad_clip / std::sqrt(norm_sq);
      auto params = net.params();
      for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = clip * grad[i] + cfg.weight_decay * params[i];
        velocity[i] = static_cast<float>(cfg.momentum * velocity[i] + g);
        params[i] = static_cast<float>(params[i] - lr * velocity[i]);
      }
      for (std::size_t i = 0; i < head_grad.size(); ++i) {
        const double g = clip * head_grad[i] + cfg.weight_decay * result.head_weights[i];
        head_velocity[i] = cfg.momentum * head_velocity[i] + g;
        result.head_weights[i] = static_cast<float>(result.head_weights[i] - lr * head_velocity[i]);
      }
    }
    const double mean_loss = loss_sum / static_cast<double>(data.size());
    if (!std::isfinite(mean_loss)) throw NumericalFailure("training loss diverged at epoch " + std::to_string(epoch), {});
    result.log.push_back({epoch, lr, mean_loss, static_cast<double>(correct) / data.size()});
  }
  return result;
}

std::string train_config_to_json(const TrainConfig& c) {
  json j = {{"batch_size", c.batch_size},     {"epochs", c.epochs},          {"lr", c.lr},
            {"lr_drop_epochs", c.lr_drop_epochs}, {"momentum", c.momentum},  {"weight_decay", c.weight_decay},
            {"focal_gamma", c.focal_gamma},   {"head_margin", c.head_margin}, {"head_scale", c.head_scale},
            {"grad_clip", c.grad_clip},       {"flip_augment", c.flip_augment}, {"shift_augment", c.shift_augment},
            {"seed", c.seed}};
  return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
  const json j = parse_json(text);
  TrainConfig c;
  try {
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.lr = j.value("lr", c.lr);
    c.lr_drop_epochs = j.value("lr_drop_epochs", c.lr_drop_epochs);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.focal_gamma = j.value("focal_gamma", c.focal_gamma);
    c.head_margin = j.value("head_margin", c.head_margin);
    c.head_scale = j.value("head_scale", c.head_scale);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.flip_augment = j.value("flip_augment", c.flip_augment);
    c.shift_augment = j.value("shift_augment", c.shift_augment);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, std::string("bad train config: ") + e.what());
  }
  if (c.batch_size < 1 || c.epochs < 0 || c.lr <= 0) fail(ErrorCode::ConfigError, "invalid train config values");
  return c;
}

std::string train_log_to_json(const std::vector<EpochRecord>& log) {
  json j = json::array();
  for (const auto& r : log) j.push_back({{"epoch", r.epoch}, {"lr", r.lr}, {"loss", r.loss}, {"accuracy", r.accuracy}});
  return j.dump(2);
}

// ---------------------------------------------------------------- feature store

std::vector<std::uint8_t> encode_feature_store(const FeatureStore& store) {
  detail::ByteWriter w;
  w.raw("LKFS");
  w.u32(1);
  w.str(store.model_id);
  w.u32(store.dim);
  w.u64(store.entries.size());
  for (const auto& e : store.entries) {
    if (e.values.size() != store.dim) fail(ErrorCode::ShapeMismatch, "feature store entry dimension mismatch");
    for (float v : e.values) w.f32(v);
  }
  for (const auto& e : store.entries) {
    w.str(e.label);
    w.str(e.image_id);
  }
  return w.take();
}

FeatureStore decode_feature_store(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  if (r.raw(4) != "LKFS") fail(ErrorCode::DecodeError, "not a feature store");
  if (r.u32() != 1) fail(ErrorCode::DecodeError, "unsupported feature store version");
  FeatureStore store;
  store.model_id = r.str();
  store.dim = r.u32();
  const std::uint64_t count = r.u64();
  if (store.dim > 0 && count > r.remaining() / (4ULL * store.dim)) fail(ErrorCode::DecodeError, "truncated feature store");
  store.entries.resize(count);
  for (auto& e : store.entries) {
    e.values.resize(store.dim);
    for (float& v : e.values) v = r.f32();
  }
  for (auto& e : store.entries) {
    e.label = r.str();
    e.image_id = r.str();
  }
  if (!r.done()) fail(ErrorCode::DecodeError, "trailing bytes in feature store");
  return store;
}

void write_feature_store(const std::filesystem::path& path, const FeatureStore& store) {
  imaging::write_bytes(path, encode_feature_store(store));
}

FeatureStore read_feature_store(const std::filesystem::path& path) {
  return decode_feature_store(imaging::read_bytes(path));
}

}  // namespace lowkey::extractors
