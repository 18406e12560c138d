#include "lowkey/attack.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "lowkey/error.hpp"

namespace lowkey::attack {

using nlohmann::json;

std::string to_string(Preset p) {
  switch (p) {
    case Preset::Small: return "small";
    case Preset::Standard: return "standard";
    case Preset::Large: return "large";
    case Preset::Custom: return "custom";
  }
  return "custom";
}

Preset preset_from_string(const std::string& s) {
  if (s == "small") return Preset::Small;
  if (s == "standard") return Preset::Standard;
  if (s == "large") return Preset::Large;
  if (s == "custom") return Preset::Custom;
  fail(ErrorCode::ConfigError, "unknown preset '" + s + "'");
}

AttackConfig AttackConfig::from_preset(Preset p) {
  AttackConfig c;
  c.preset = p;
  switch (p) {
    case Preset::Small:
      c.alpha = 0.08;
      c.steps = 25;
      break;
    case Preset::Large:
      c.steps = 100;
      break;
    default:
      break;
  }
  return c;
}

void AttackConfig::validate() const {
  if (!(alpha >= 0) || !std::isfinite(alpha)) fail(ErrorCode::ConfigError, "alpha must be a finite value >= 0");
  if (steps < 0) fail(ErrorCode::ConfigError, "steps must be >= 0");
  if (!(step_size > 0) || !std::isfinite(step_size)) fail(ErrorCode::ConfigError, "step_size must be > 0");
  if (!(init_noise >= 0) || init_noise > 0.5) fail(ErrorCode::ConfigError, "init_noise must be in [0, 0.5]");
  if (!(face_confidence >= 0 && face_confidence <= 1))
    fail(ErrorCode::ConfigError, "face_confidence must be in [0, 1]");
}

std::string config_to_json(const AttackConfig& c) {
  json j{{"preset", to_string(c.preset)},
         {"alpha", c.alpha},
         {"steps", c.steps},
         {"step_size", c.step_size},
         {"smoothing", {{"sigma", c.smoothing.sigma()}, {"window", c.smoothing.window()}}},
         {"init_noise", c.init_noise},
         {"seed", c.seed},
         {"face_confidence", c.face_confidence},
         {"use_smoothed_term", c.use_smoothed_term}};
  return j.dump(2);
}

AttackConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, std::string("attack config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) fail(ErrorCode::ConfigError, "attack config must be a JSON object");
  try {
    // Preset first, explicit fields override it.
    AttackConfig c = AttackConfig::from_preset(preset_from_string(j.value("preset", std::string("standard"))));
    c.alpha = j.value("alpha", c.alpha);
    c.steps = j.value("steps", c.steps);
    c.step_size = j.value("step_size", c.step_size);
    if (j.contains("smoothing")) {
      const auto& s = j.at("smoothing");
      c.smoothing = imaging::SmoothingKernel(s.value("sigma", c.smoothing.sigma()), s.value("window", c.smoothing.window()));
    }
    c.init_noise = j.value("init_noise", c.init_noise);
    c.seed = j.value("seed", c.seed);
    c.face_confidence = j.value("face_confidence", c.face_confidence);
    c.use_smoothed_term = j.value("use_smoothed_term", c.use_smoothed_term);
    c.validate();
    return c;
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, std::string("attack config field has the wrong type: ") + e.what());
  }
}

AttackConfig read_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_json(ss.str());
}

void write_config(const std::filesystem::path& path, const AttackConfig& cfg) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out << config_to_json(cfg) << "\n";
}

std::string result_summary_json(const ProtectionResult& r) {
  json j{{"per_model_displacement", r.per_model_displacement},
         {"lpips_cost", r.lpips_cost},
         {"lpips_network", r.lpips_network_id},
         {"objective_trace", r.objective_trace},
         {"faces_attacked", r.faces_attacked},
         {"config", json::parse(config_to_json(r.config))}};
  return j.dump(2);
}

// ---------------------------------------------------------------- objective

template <typename T>
LowKeyObjective<T>::LowKeyObjective(const Tensor<T>& x, const Models& ensemble,
                                    const std::vector<face::AlignmentTransform>& transforms, const AttackConfig& cfg,
                                    const perceptual::PerceptualMetric& metric)
    : cfg_(cfg), metric_(&metric), height_(x.height()), width_(x.width()) {
  if (ensemble.empty()) fail(ErrorCode::ConfigError, "attack ensemble is empty");
  if (transforms.empty()) fail(ErrorCode::ConfigError, "no face transforms to attack");
  if (x.channels() != 3) fail(ErrorCode::ShapeMismatch, "attack expects a 3-channel image");
  for (const auto& m : ensemble) {
    if (!m) fail(ErrorCode::ConfigError, "null ensemble member");
    if constexpr (std::is_same_v<T, float>)
      nets_.push_back(m->network());
    else
      nets_.push_back(m->network().template cast<T>());
  }
  for (const auto& t : transforms) {
    if (!t.frozen()) fail(ErrorCode::ConfigError, "attack requires frozen alignment transforms");
    warps_.emplace_back(t, height_, width_);
  }
  for (std::size_t f = 0; f < warps_.size(); ++f) {
    const Tensor<T> crop = warps_[f].forward(x);
    clean_.emplace_back();
    clean_norm_.emplace_back();
    for (std::size_t i = 0; i < nets_.size(); ++i) {
      const Tensor<T> emb = nets_[i].forward(crop);
      double n2 = 0;
      for (T v : emb.values()) n2 += static_cast<double>(v) * v;
      const double norm = std::sqrt(n2);
      if (!(norm > 0) || !std::isfinite(norm))
        fail(ErrorCode::DegenerateFeatures, "clean embedding of model " + ensemble[i]->model_id() + " has zero norm");
      clean_.back().emplace_back(emb.values().begin(), emb.values().end());
      clean_norm_.back().push_back(norm);
    }
  }
  if (cfg_.alpha > 0) ref_taps_ = metric_->features(x);
}

template <typename T>
double LowKeyObjective<T>::value(const Tensor<T>& x_prime) const {
  return evaluate(x_prime, nullptr);
}

template <typename T>
double LowKeyObjective<T>::value_and_grad(const Tensor<T>& x_prime, Tensor<T>& grad) const {
  return evaluate(x_prime, &grad);
}

template <typename T>
double LowKeyObjective<T>::evaluate(const Tensor<T>& xp, Tensor<T>* grad) const {
  if (xp.channels() != 3 || xp.height() != height_ || xp.width() != width_)
    fail(ErrorCode::ShapeMismatch, "x' must match the shape of x");
  const std::size_t n = nets_.size();
  const double scale = 1.0 / (2.0 * static_cast<double>(n) * static_cast<double>(warps_.size()));
  const bool two_branches = cfg_.use_smoothed_term;
  Tensor<T> smoothed;
  if (two_branches) smoothed = imaging::smooth_tensor(xp, cfg_.smoothing);

  Tensor<T> g_plain, g_smooth;
  if (grad) {
    g_plain = Tensor<T>(3, height_, width_);
    if (two_branches) g_smooth = Tensor<T>(3, height_, width_);
  }

  double feature_sum = 0;
  for (std::size_t f = 0; f < warps_.size(); ++f) {
    for (int branch = 0; branch < (two_branches ? 2 : 1); ++branch) {
      const Tensor<T> crop = warps_[f].forward(branch == 0 ? xp : smoothed);
      Tensor<T> g_crop;
      if (grad) g_crop = Tensor<T>(3, crop.height(), crop.width());
      for (std::size_t i = 0; i < n; ++i) {
        typename nn::Network<T>::Tape tape;
        const Tensor<T> emb = nets_[i].forward(crop, grad ? &tape : nullptr);
        const auto& c = clean_[f][i];
        if (emb.size() != c.size()) fail(ErrorCode::ModelContractViolation, "embedding size changed");
        double d2 = 0;
        for (std::size_t k = 0; k < c.size(); ++k) {
          const double d = static_cast<double>(emb.data()[k]) - c[k];
          d2 += d * d;
        }
        feature_sum += d2 / clean_norm_[f][i];
        if (grad) {
          Tensor<T> g_emb(emb.channels(), emb.height(), emb.width());
          const double k2 = 2.0 * scale / clean_norm_[f][i];
          for (std::size_t k = 0; k < c.size(); ++k)
            g_emb.data()[k] = static_cast<T>(k2 * (static_cast<double>(emb.data()[k]) - c[k]));
          const Tensor<T> gi = nets_[i].backward(tape, g_emb);
          auto dst = g_crop.values();
          auto src = gi.values();
          for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
        }
      }
      if (grad) {
        const Tensor<T> gimg = warps_[f].adjoint(g_crop);
        auto dst = (branch == 0 ? g_plain : g_smooth).values();
        auto src = gimg.values();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    }
  }
  double value = scale * feature_sum;

  if (grad) {
    if (two_branches) {
      const Tensor<T> back = imaging::smooth_tensor_adjoint(g_smooth, cfg_.smoothing);
      auto dst = g_plain.values();
      auto src = back.values();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
  if (cfg_.alpha > 0) {
    Tensor<T> g_lp;
    const double lp = metric_->distance_to(ref_taps_, xp, grad ? &g_lp : nullptr);
    value -= cfg_.alpha * lp;
    if (grad) {
      auto dst = g_plain.values();
      auto src = g_lp.values();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] -= static_cast<T>(cfg_.alpha * src[k]);
    }
  }
  if (grad) *grad = std::move(g_plain);
  return value;
}

template <typename T>
std::vector<double> LowKeyObjective<T>::displacement(const Tensor<T>& xp) const {
  std::vector<double> out(nets_.size(), 0.0);
  for (std::size_t f = 0; f < warps_.size(); ++f) {
    const Tensor<T> crop = warps_[f].forward(xp);
    for (std::size_t i = 0; i < nets_.size(); ++i) {
      const Tensor<T> emb = nets_[i].forward(crop);
      double d2 = 0;
      for (std::size_t k = 0; k < emb.size(); ++k) {
        const double d = static_cast<double>(emb.data()[k]) - clean_[f][i][k];
        d2 += d * d;
      }
      out[i] += std::sqrt(d2) / clean_norm_[f][i] / static_cast<double>(warps_.size());
    }
  }
  return out;
}

template class LowKeyObjective<float>;
template class LowKeyObjective<double>;

double lowkey_objective(const imaging::ImageTensor& x, const imaging::ImageTensor& x_prime, const Models& ensemble,
                        const std::vector<face::AlignmentTransform>& transforms, const AttackConfig& cfg) {
  return LowKeyObjective<float>(x.tensor(), ensemble, transforms, cfg).value(x_prime.tensor());
}

// ---------------------------------------------------------------- ascent

template <typename T>
Tensor<T> signed_step(const Tensor<T>& x, const Tensor<T>& grad, double step_size) {
  if (!x.same_shape(grad)) fail(ErrorCode::ShapeMismatch, "gradient shape differs from the image");
  Tensor<T> out = x;
  auto o = out.values();
  auto g = grad.values();
  const T s = static_cast<T>(step_size);
  for (std::size_t i = 0; i < o.size(); ++i) {
    const T dir = g[i] > T(0) ? T(1) : (g[i] < T(0) ? T(-1) : T(0));
    o[i] = std::clamp(o[i] + s * dir, T(0), T(1));
  }
  return out;
}

template Tensor<float> signed_step(const Tensor<float>&, const Tensor<float>&, double);
template Tensor<double> signed_step(const Tensor<double>&, const Tensor<double>&, double);

imaging::ImageTensor signed_step(const imaging::ImageTensor& x, const Tensor<float>& grad, double step_size) {
  return imaging::clip_to_range(signed_step(x.tensor(), grad, step_size));
}

namespace {

std::vector<face::FaceDetection> faces_to_attack(const std::vector<face::FaceDetection>& dets, double threshold) {
  std::vector<face::FaceDetection> out;
  for (const auto& d : dets)
    if (d.confidence >= threshold) out.push_back(d);
  if (out.empty() && !dets.empty()) out.push_back(dets.front());
  return out;
}

}  // namespace

ProtectionResult protect(const imaging::ImageTensor& image, const Models& ensemble, const AttackConfig& cfg,
                         face::FaceDetector& detector, const perceptual::PerceptualMetric& metric) {
  cfg.validate();
  if (ensemble.empty()) fail(ErrorCode::ConfigError, "attack ensemble is empty");
  // The only detector call of the run; every later A(.) reuses these transforms.
  const auto dets = face::detect_faces(detector, image);
  if (dets.empty()) fail(ErrorCode::NoFaceFound, "no face detected in the input image");
  const auto chosen = faces_to_attack(dets, cfg.face_confidence);
  std::vector<face::AlignmentTransform> transforms;
  for (const auto& d : chosen) transforms.push_back(face::build_alignment(d));

  const Tensor<float>& x = image.tensor();
  const LowKeyObjective<float> objective(x, ensemble, transforms, cfg, metric);

  Tensor<float> xp = x;
  if (cfg.init_noise > 0) {
    std::mt19937_64 rng(cfg.seed);
    std::uniform_real_distribution<double> u(-cfg.init_noise, cfg.init_noise);
    for (float& v : xp.values()) v = std::clamp(static_cast<float>(v + u(rng)), 0.0f, 1.0f);
  }

  ProtectionResult r;
  r.config = cfg;
  r.faces_attacked = static_cast<int>(transforms.size());
  r.lpips_network_id = metric.network_id();
  Tensor<float> grad;
  for (int step = 0; step <= cfg.steps; ++step) {
    const double v = step < cfg.steps ? objective.value_and_grad(xp, grad) : objective.value(xp);
    r.objective_trace.push_back(v);
    bool finite = std::isfinite(v);
    if (finite && step < cfg.steps)
      for (float g : grad.values())
        if (!std::isfinite(g)) {
          finite = false;
          break;
        }
    if (!finite)
      throw NumericalFailure("non-finite objective or gradient at step " + std::to_string(step), r.objective_trace);
    if (step < cfg.steps) xp = signed_step(xp, grad, cfg.step_size);
  }
  const auto disp = objective.displacement(xp);
  for (std::size_t i = 0; i < ensemble.size(); ++i) r.per_model_displacement[ensemble[i]->model_id()] = disp[i];
  r.lpips_cost = metric.distance(x, xp);
  r.protected_image = imaging::clip_to_range(std::move(xp));
  return r;
}

ProtectionResult protect(const imaging::ImageTensor& image, const Models& ensemble, const AttackConfig& cfg) {
  face::SkinBlobDetector detector;
  return protect(image, ensemble, cfg, detector);
}

// ---------------------------------------------------------------- runtime

std::string hardware_descriptor() {
  std::string model = "unknown cpu";
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto pos = line.find(':');
      if (pos != std::string::npos) model = line.substr(pos + 2);
      break;
    }
  }
  return model + ", " + std::to_string(std::max(1u, std::thread::hardware_concurrency())) + " hardware threads";
}

RuntimeReport benchmark_runtime(const std::vector<imaging::ImageTensor>& images, const Models& ensemble,
                                const AttackConfig& cfg) {
  if (images.empty()) fail(ErrorCode::ConfigError, "benchmark_runtime needs at least one image");
  RuntimeReport rep;
  rep.hardware = hardware_descriptor();
  rep.steps = cfg.steps;
  face::SkinBlobDetector detector;
  for (const auto& img : images) {
    const auto t0 = std::chrono::steady_clock::now();
    (void)protect(img, ensemble, cfg, detector);
    rep.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  double sum = 0;
  for (double s : rep.seconds) sum += s;
  rep.mean = sum / rep.seconds.size();
  std::vector<double> sorted = rep.seconds;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t m = sorted.size() / 2;
  rep.median = sorted.size() % 2 ? sorted[m] : 0.5 * (sorted[m - 1] + sorted[m]);
  return rep;
}

std::string runtime_report_json(const RuntimeReport& r) {
  json j{{"hardware", r.hardware}, {"steps", r.steps}, {"mean_seconds", r.mean},
         {"median_seconds", r.median}, {"per_image_seconds", r.seconds}};
  return j.dump(2);
}

}  // namespace lowkey::attack
