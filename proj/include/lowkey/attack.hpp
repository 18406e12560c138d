#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "lowkey/extractors.hpp"
#include "lowkey/face.hpp"
#include "lowkey/imaging.hpp"
#include "lowkey/nn.hpp"
#include "lowkey/perceptual.hpp"

namespace lowkey::attack {

using Models = std::vector<std::shared_ptr<const extractors::FeatureExtractor>>;

enum class Preset { Small, Standard, Large, Custom };

std::string to_string(Preset p);
Preset preset_from_string(const std::string& s);

struct AttackConfig {
  double alpha = 0.05;
  int steps = 50;
  double step_size = 0.0025;
  imaging::SmoothingKernel smoothing{3.0, 7};
  double init_noise = 1.0 / 255.0;
  Preset preset = Preset::Standard;
  std::uint64_t seed = 0;
  // Detections at or above this confidence are attacked; when none qualify the
  // most confident one is used.
  double face_confidence = 0.9;
  // Drop the G(x') branch (ablation).
  bool use_smoothed_term = true;

  static AttackConfig from_preset(Preset p);
  // Throws ConfigError.
  void validate() const;
};

std::string config_to_json(const AttackConfig& cfg);
AttackConfig config_from_json(const std::string& text);
AttackConfig read_config(const std::filesystem::path& path);
void write_config(const std::filesystem::path& path, const AttackConfig& cfg);

struct ProtectionResult {
  imaging::ImageTensor protected_image;
  std::map<std::string, double> per_model_displacement;
  double lpips_cost = 0;
  std::vector<double> objective_trace;
  AttackConfig config;
  int faces_attacked = 0;
  std::string lpips_network_id;
};

std::string result_summary_json(const ProtectionResult& r);

// The LowKey objective with clean features, their norms and the perceptual reference taps
// cached at construction. T = double is used for gradient checks.
template <typename T>
class LowKeyObjective {
 public:
  // Throws ConfigError on an empty ensemble or unfrozen transform and
  // DegenerateFeatures on a zero-norm clean embedding.
  LowKeyObjective(const Tensor<T>& x, const Models& ensemble, const std::vector<face::AlignmentTransform>& transforms,
                  const AttackConfig& cfg, const perceptual::PerceptualMetric& metric = perceptual::default_metric());

  double value(const Tensor<T>& x_prime) const;
  double value_and_grad(const Tensor<T>& x_prime, Tensor<T>& grad) const;

  // ||f_i(A(x')) - f_i(A(x))|| / ||f_i(A(x))|| per model, averaged over faces.
  std::vector<double> displacement(const Tensor<T>& x_prime) const;

  std::size_t model_count() const noexcept { return nets_.size(); }
  std::size_t face_count() const noexcept { return warps_.size(); }

 private:
  double evaluate(const Tensor<T>& x_prime, Tensor<T>* grad) const;

  std::vector<nn::Network<T>> nets_;
  std::vector<face::FaceWarp> warps_;
  std::vector<std::vector<std::vector<T>>> clean_;  // [face][model]
  std::vector<std::vector<double>> clean_norm_;
  AttackConfig cfg_;
  const perceptual::PerceptualMetric* metric_;
  perceptual::FeatureTaps<T> ref_taps_;
  int height_ = 0;
  int width_ = 0;
};

extern template class LowKeyObjective<float>;
extern template class LowKeyObjective<double>;

double lowkey_objective(const imaging::ImageTensor& x, const imaging::ImageTensor& x_prime, const Models& ensemble,
                        const std::vector<face::AlignmentTransform>& transforms, const AttackConfig& cfg);

template <typename T>
Tensor<T> signed_step(const Tensor<T>& x_prime, const Tensor<T>& grad, double step_size);
imaging::ImageTensor signed_step(const imaging::ImageTensor& x_prime, const Tensor<float>& grad, double step_size);

// Full procedure: detect once on `image`, freeze the alignments, ascend.
// Throws NoFaceFound and NumericalFailure.
ProtectionResult protect(const imaging::ImageTensor& image, const Models& ensemble, const AttackConfig& cfg,
                         face::FaceDetector& detector,
                         const perceptual::PerceptualMetric& metric = perceptual::default_metric());
ProtectionResult protect(const imaging::ImageTensor& image, const Models& ensemble, const AttackConfig& cfg);

struct RuntimeReport {
  std::vector<double> seconds;  // per image
  double mean = 0;
  double median = 0;
  std::string hardware;
  int steps = 0;
};

std::string hardware_descriptor();
RuntimeReport benchmark_runtime(const std::vector<imaging::ImageTensor>& images, const Models& ensemble,
                                const AttackConfig& cfg);
std::string runtime_report_json(const RuntimeReport& r);

}  // namespace lowkey::attack
