#pragma once

#include <string>
#include <vector>

#include "lowkey/imaging.hpp"
#include "lowkey/nn.hpp"
#include "lowkey/tensor.hpp"

// LPIPS-style perceptual distance: channel-normalised activations of a frozen
// convolutional feature network, squared differences weighted per channel,
// averaged over space and summed over taps.
namespace lowkey::perceptual {

inline constexpr const char* kDefaultNetworkId = "lk-gabor-rand-v1";

struct PerceptualMetricSpec {
  std::string feature_network_id = kDefaultNetworkId;
  std::vector<std::string> layer_set;                 // tap names
  std::vector<std::vector<double>> layer_weights;     // one per tap, one weight per channel

  // Throws ConfigError on an empty tap set or a negative weight.
  void validate() const;
};

PerceptualMetricSpec default_spec();

template <typename T>
struct FeatureTaps {
  std::vector<Tensor<T>> normalized;  // per tap, C x H x W
};

class PerceptualMetric {
 public:
  // Only kDefaultNetworkId is known; anything else is a ConfigError.
  explicit PerceptualMetric(PerceptualMetricSpec spec = default_spec());

  const PerceptualMetricSpec& spec() const noexcept { return spec_; }
  const std::string& network_id() const noexcept { return spec_.feature_network_id; }

  template <typename T>
  FeatureTaps<T> features(const Tensor<T>& image) const;

  template <typename T>
  double distance(const Tensor<T>& x, const Tensor<T>& y) const;

  // Distance from cached reference taps to `y`; when `grad_y` is non-null it
  // receives d(distance)/d(y).
  template <typename T>
  double distance_to(const FeatureTaps<T>& ref, const Tensor<T>& y, Tensor<T>* grad_y = nullptr) const;

 private:
  template <typename T>
  const std::vector<nn::Network<T>>& stages() const;

  PerceptualMetricSpec spec_;
  std::vector<nn::Network<double>> stages_d_;
  std::vector<nn::Network<float>> stages_f_;
};

// Shared default-spec instance; safe for concurrent use.
const PerceptualMetric& default_metric();

// Throws ShapeMismatch for images of different size.
double lpips(const imaging::ImageTensor& x, const imaging::ImageTensor& y,
             const PerceptualMetric& metric = default_metric());

}  // namespace lowkey::perceptual
