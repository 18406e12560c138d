#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "lowkey/attack.hpp"
#include "lowkey/extractors.hpp"
#include "lowkey/face.hpp"
#include "lowkey/imaging.hpp"
#include "lowkey/nn.hpp"
#include "lowkey/synth.hpp"

namespace testing_support {

using namespace lowkey;

// A few-hundred-parameter embedding network on 112x112 crops; fast enough for
// finite differences in double precision.
inline std::vector<nn::LayerDesc> tiny_layers(int embed_dim = 8) {
  std::vector<nn::LayerDesc> l(5);
  l[0].kind = nn::LayerKind::InputNorm;
  l[0].in_channels = l[0].out_channels = 3;
  l[1].kind = nn::LayerKind::AvgPool;
  l[1].in_channels = l[1].out_channels = 3;
  l[1].kernel = 8;
  l[2].kind = nn::LayerKind::Conv;
  l[2].in_channels = 3;
  l[2].out_channels = 4;
  l[2].kernel = 3;
  l[2].stride = 2;
  l[2].pad = 1;
  l[3].kind = nn::LayerKind::PReLU;
  l[3].in_channels = l[3].out_channels = 4;
  l[4].kind = nn::LayerKind::Linear;
  l[4].in_features = 4 * 7 * 7;
  l[4].out_features = embed_dim;
  return l;
}

inline std::shared_ptr<const extractors::FeatureExtractor> tiny_extractor(std::uint64_t seed, int embed_dim = 8) {
  nn::Network<float> net(tiny_layers(embed_dim));
  net.initialize(seed);
  extractors::ExtractorSpec spec{extractors::Backbone::IR50, extractors::Head::ArcFace, "", embed_dim,
                                 "tiny" + std::to_string(seed)};
  return std::make_shared<extractors::FeatureExtractor>(spec, std::move(net));
}

inline attack::Models tiny_ensemble(int n, std::uint64_t seed = 11) {
  attack::Models m;
  for (int i = 0; i < n; ++i) m.push_back(tiny_extractor(seed + i));
  return m;
}

inline imaging::ImageTensor random_image(int h, int w, std::uint64_t seed, float lo = 0.0f, float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  Tensor<float> t(3, h, w);
  for (float& v : t.values()) v = u(rng);
  return imaging::ImageTensor::from_tensor(std::move(t));
}

inline synth::Scene portrait(std::uint64_t seed) {
  return synth::render_portrait(synth::sample_identity(seed), seed * 7 + 1);
}

// Returns scripted detections and counts how often it was asked.
class ScriptedDetector : public face::FaceDetector {
 public:
  explicit ScriptedDetector(std::vector<face::FaceDetection> dets) : dets_(std::move(dets)) {}
  std::vector<face::FaceDetection> detect(const imaging::ImageTensor&) override {
    ++calls;
    return dets_;
  }
  int calls = 0;

 private:
  std::vector<face::FaceDetection> dets_;
};

class CountingDetector : public face::FaceDetector {
 public:
  std::vector<face::FaceDetection> detect(const imaging::ImageTensor& img) override {
    ++calls;
    return inner_.detect(img);
  }
  int calls = 0;

 private:
  face::SkinBlobDetector inner_;
};

inline double rel_err(double a, double b) {
  const double d = std::abs(a - b);
  const double s = std::max(std::abs(a), std::abs(b));
  return s < 1e-12 ? d : d / s;
}

}  // namespace testing_support
