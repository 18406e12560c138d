#include "lowkey/perceptual.hpp"

#include <cmath>

#include "lowkey/error.hpp"

namespace lowkey::perceptual {

namespace {

constexpr double kNormEps = 1e-10;
constexpr int kFirstChannels = 24;
constexpr int kFirstKernel = 7;
const int kTapChannels[3] = {kFirstChannels, 32, 48};

nn::LayerDesc conv(int in, int out, int k, int stride) {
  nn::LayerDesc d;
  d.kind = nn::LayerKind::Conv;
  d.in_channels = in;
  d.out_channels = out;
  d.kernel = k;
  d.stride = stride;
  d.pad = k / 2;
  return d;
}

nn::LayerDesc relu(int c) {
  nn::LayerDesc d;
  d.kind = nn::LayerKind::ReLU;
  d.in_channels = c;
  d.out_channels = c;
  return d;
}

// Hand-built first layer: colour low-pass, colour opponents, oriented Gabor
// pairs on luma and a centre-surround cell. Output channel order is fixed.
void fill_first_layer(nn::Network<double>& net) {
  const int k = kFirstKernel;
  const int r = k / 2;
  auto p = net.params();
  const std::size_t wsize = static_cast<std::size_t>(kFirstChannels) * 3 * k * k;
  auto w = [&](int o, int c, int y, int x) -> double& {
    return p[((static_cast<std::size_t>(o) * 3 + c) * k + y) * k + x];
  };
  auto bias = [&](int o) -> double& { return p[wsize + o]; };
  auto gauss = [&](int y, int x, double s) { return std::exp(-((x - r) * (x - r) + (y - r) * (y - r)) / (2 * s * s)); };
  double gsum = 0;
  for (int y = 0; y < k; ++y)
    for (int x = 0; x < k; ++x) gsum += gauss(y, x, 1.5);
  const double luma[3] = {0.299, 0.587, 0.114};

  int o = 0;
  for (int c = 0; c < 3; ++c, ++o) {
    for (int y = 0; y < k; ++y)
      for (int x = 0; x < k; ++x) w(o, c, y, x) = gauss(y, x, 1.5) / gsum;
    bias(o) = 0.05;
  }
  const double opp[2][3] = {{1, -1, 0}, {-0.5, -0.5, 1}};
  for (const auto& v : opp)
    for (double sign : {1.0, -1.0}) {
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < k; ++y)
          for (int x = 0; x < k; ++x) w(o, c, y, x) = 2.0 * sign * v[c] * gauss(y, x, 1.5) / gsum;
      ++o;
    }
  for (int orient = 0; orient < 4; ++orient) {
    const double th = orient * M_PI / 4;
    for (int phase = 0; phase < 2; ++phase)
      for (double sign : {1.0, -1.0}) {
        double mean = 0;
        std::vector<double> g(static_cast<std::size_t>(k) * k);
        for (int y = 0; y < k; ++y)
          for (int x = 0; x < k; ++x) {
            const double u = (x - r) * std::cos(th) + (y - r) * std::sin(th);
            const double env = gauss(y, x, 1.6);
            g[y * k + x] = env * (phase == 0 ? std::cos(2 * M_PI * u / 4.0) : std::sin(2 * M_PI * u / 4.0));
            mean += g[y * k + x];
          }
        mean /= g.size();
        for (int y = 0; y < k; ++y)
          for (int x = 0; x < k; ++x)
            for (int c = 0; c < 3; ++c) w(o, c, y, x) = sign * 0.5 * luma[c] * (g[y * k + x] - (phase == 0 ? mean : 0));
        ++o;
      }
  }
  {
    double csum = 0, ssum = 0;
    for (int y = 0; y < k; ++y)
      for (int x = 0; x < k; ++x) {
        csum += gauss(y, x, 0.8);
        ssum += gauss(y, x, 2.0);
      }
    for (int y = 0; y < k; ++y)
      for (int x = 0; x < k; ++x)
        for (int c = 0; c < 3; ++c) w(o, c, y, x) = 2.0 * luma[c] * (gauss(y, x, 0.8) / csum - gauss(y, x, 2.0) / ssum);
    ++o;
  }
}

std::vector<nn::Network<double>> build_default_stages() {
  std::vector<nn::Network<double>> stages;
  stages.emplace_back(std::vector<nn::LayerDesc>{conv(3, kTapChannels[0], kFirstKernel, 2), relu(kTapChannels[0])});
  fill_first_layer(stages.back());
  for (int s = 1; s < 3; ++s) {
    stages.emplace_back(
        std::vector<nn::LayerDesc>{conv(kTapChannels[s - 1], kTapChannels[s], 3, 2), relu(kTapChannels[s])});
    stages.back().initialize(0x1b1b5 + s);
  }
  return stages;
}

// n = f / sqrt(sum_c f^2 + eps) at every pixel.
template <typename T>
Tensor<T> channel_normalize(const Tensor<T>& f, std::vector<double>* inv_norm = nullptr) {
  Tensor<T> out(f.channels(), f.height(), f.width());
  const std::size_t plane = static_cast<std::size_t>(f.height()) * f.width();
  if (inv_norm) inv_norm->assign(plane, 0.0);
  for (std::size_t i = 0; i < plane; ++i) {
    double s = kNormEps;
    for (int c = 0; c < f.channels(); ++c) {
      const double v = f.data()[c * plane + i];
      s += v * v;
    }
    const double inv = 1.0 / std::sqrt(s);
    if (inv_norm) (*inv_norm)[i] = inv;
    for (int c = 0; c < f.channels(); ++c) out.data()[c * plane + i] = static_cast<T>(f.data()[c * plane + i] * inv);
  }
  return out;
}

}  // namespace

void PerceptualMetricSpec::validate() const {
  if (layer_set.empty()) fail(ErrorCode::ConfigError, "perceptual metric needs at least one tap");
  if (layer_weights.size() != layer_set.size())
    fail(ErrorCode::ConfigError, "one weight vector per tap is required");
  for (const auto& lw : layer_weights)
    for (double v : lw)
      if (!(v >= 0)) fail(ErrorCode::ConfigError, "perceptual layer weights must be nonnegative");
}

PerceptualMetricSpec default_spec() {
  PerceptualMetricSpec s;
  s.layer_set = {"relu1", "relu2", "relu3"};
  for (int c : kTapChannels) s.layer_weights.emplace_back(c, 1.0);
  return s;
}

PerceptualMetric::PerceptualMetric(PerceptualMetricSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  if (spec_.feature_network_id != kDefaultNetworkId)
    fail(ErrorCode::ConfigError, "unknown perceptual feature network '" + spec_.feature_network_id + "'");
  if (spec_.layer_set.size() > 3) fail(ErrorCode::ConfigError, "feature network has three taps");
  for (std::size_t l = 0; l < spec_.layer_set.size(); ++l)
    if (spec_.layer_weights[l].size() != static_cast<std::size_t>(kTapChannels[l]))
      fail(ErrorCode::ConfigError, "tap " + spec_.layer_set[l] + " expects " + std::to_string(kTapChannels[l]) +
                                       " channel weights");
  stages_d_ = build_default_stages();
  stages_d_.resize(spec_.layer_set.size());
  for (const auto& s : stages_d_) stages_f_.push_back(s.cast<float>());
}

template <typename T>
const std::vector<nn::Network<T>>& PerceptualMetric::stages() const {
  if constexpr (std::is_same_v<T, double>)
    return stages_d_;
  else
    return stages_f_;
}

template <typename T>
FeatureTaps<T> PerceptualMetric::features(const Tensor<T>& image) const {
  if (image.channels() != 3) fail(ErrorCode::ShapeMismatch, "perceptual metric expects 3-channel images");
  FeatureTaps<T> taps;
  Tensor<T> act = image;
  for (const auto& stage : stages<T>()) {
    act = stage.forward(act);
    taps.normalized.push_back(channel_normalize(act));
  }
  return taps;
}

template <typename T>
double PerceptualMetric::distance(const Tensor<T>& x, const Tensor<T>& y) const {
  if (!x.same_shape(y)) fail(ErrorCode::ShapeMismatch, "lpips inputs differ in shape");
  return distance_to(features(x), y);
}

template <typename T>
double PerceptualMetric::distance_to(const FeatureTaps<T>& ref, const Tensor<T>& y, Tensor<T>* grad_y) const {
  if (y.channels() != 3) fail(ErrorCode::ShapeMismatch, "perceptual metric expects 3-channel images");
  const auto& st = stages<T>();
  if (ref.normalized.size() != st.size()) fail(ErrorCode::ShapeMismatch, "reference taps do not match the metric");

  std::vector<typename nn::Network<T>::Tape> tapes(st.size());
  std::vector<Tensor<T>> raw;
  Tensor<T> act = y;
  for (std::size_t l = 0; l < st.size(); ++l) {
    act = st[l].forward(act, grad_y ? &tapes[l] : nullptr);
    if (!act.same_shape(ref.normalized[l])) fail(ErrorCode::ShapeMismatch, "lpips inputs differ in shape");
    raw.push_back(act);
  }

  double total = 0;
  std::vector<Tensor<T>> tap_grads;
  for (std::size_t l = 0; l < st.size(); ++l) {
    const Tensor<T>& f = raw[l];
    const Tensor<T>& nr = ref.normalized[l];
    const auto& wl = spec_.layer_weights[l];
    std::vector<double> inv;
    const Tensor<T> n = channel_normalize(f, &inv);
    const std::size_t plane = static_cast<std::size_t>(f.height()) * f.width();
    const int C = f.channels();
    double sum = 0;
    for (int c = 0; c < C; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = static_cast<double>(n.data()[c * plane + i]) - nr.data()[c * plane + i];
        sum += wl[c] * d * d;
      }
    total += sum / static_cast<double>(plane);
    if (!grad_y) continue;

    // d/df of sum_c w_c (f_c*inv - r_c)^2 / P, with inv = (sum f^2 + eps)^-1/2.
    Tensor<T> g(C, f.height(), f.width());
    std::vector<double> gn(C);
    for (std::size_t i = 0; i < plane; ++i) {
      double dot = 0;
      for (int c = 0; c < C; ++c) {
        const double d = static_cast<double>(n.data()[c * plane + i]) - nr.data()[c * plane + i];
        gn[c] = 2.0 * wl[c] * d / static_cast<double>(plane);
        dot += gn[c] * n.data()[c * plane + i];
      }
      for (int c = 0; c < C; ++c)
        g.data()[c * plane + i] = static_cast<T>(inv[i] * (gn[c] - n.data()[c * plane + i] * dot));
    }
    tap_grads.push_back(std::move(g));
  }
  if (grad_y) {
    Tensor<T> g = tap_grads.back();
    for (std::size_t l = st.size(); l-- > 0;) {
      if (l + 1 < st.size()) {
        auto dst = g.values();
        auto src = tap_grads[l].values();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
      }
      g = st[l].backward(tapes[l], g);
    }
    *grad_y = std::move(g);
  }
  return total;
}

const PerceptualMetric& default_metric() {
  static const PerceptualMetric metric;
  return metric;
}

double lpips(const imaging::ImageTensor& x, const imaging::ImageTensor& y, const PerceptualMetric& metric) {
  return metric.distance(x.tensor(), y.tensor());
}

template FeatureTaps<float> PerceptualMetric::features(const Tensor<float>&) const;
template FeatureTaps<double> PerceptualMetric::features(const Tensor<double>&) const;
template double PerceptualMetric::distance(const Tensor<float>&, const Tensor<float>&) const;
template double PerceptualMetric::distance(const Tensor<double>&, const Tensor<double>&) const;
template double PerceptualMetric::distance_to(const FeatureTaps<float>&, const Tensor<float>&, Tensor<float>*) const;
template double PerceptualMetric::distance_to(const FeatureTaps<double>&, const Tensor<double>&, Tensor<double>*) const;

}  // namespace lowkey::perceptual
