#include "lowkey/nn.hpp"

#include <cmath>
#include <random>

#include "lowkey/error.hpp"
#include "lowkey/kernels.hpp"

namespace lowkey::nn {

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::InputNorm: return "input_norm";
    case LayerKind::Conv: return "conv";
    case LayerKind::ReLU: return "relu";
    case LayerKind::PReLU: return "prelu";
    case LayerKind::Affine: return "affine";
    case LayerKind::AvgPool: return "avg_pool";
    case LayerKind::Linear: return "linear";
    case LayerKind::SkipSave: return "skip_save";
    case LayerKind::SkipAdd: return "skip_add";
  }
  return "unknown";
}

LayerKind layer_kind_from_string(const std::string& name) {
  for (LayerKind k : {LayerKind::InputNorm, LayerKind::Conv, LayerKind::ReLU, LayerKind::PReLU,
                      LayerKind::Affine, LayerKind::AvgPool, LayerKind::Linear, LayerKind::SkipSave,
                      LayerKind::SkipAdd})
    if (to_string(k) == name) return k;
  fail(ErrorCode::ConfigError, "unknown layer kind '" + name + "'");
}

std::size_t param_count(const LayerDesc& l) {
  switch (l.kind) {
    case LayerKind::Conv:
      return static_cast<std::size_t>(l.out_channels) * l.in_channels * l.kernel * l.kernel + l.out_channels;
    case LayerKind::PReLU: return l.in_channels;
    case LayerKind::Affine: return 2 * static_cast<std::size_t>(l.in_channels);
    case LayerKind::Linear: return static_cast<std::size_t>(l.out_features) * l.in_features + l.out_features;
    default: return 0;
  }
}

namespace {

template <typename T>
kernels::ConvShape conv_shape(const LayerDesc& l, const Tensor<T>& in) {
  if (in.channels() != l.in_channels)
    fail(ErrorCode::ModelContractViolation, "conv expects " + std::to_string(l.in_channels) +
                                                " channels, got " + std::to_string(in.channels()));
  return {l.in_channels, in.height(), in.width(), l.out_channels, l.kernel, l.stride, l.pad};
}

template <typename T>
void check_channels(const LayerDesc& l, const Tensor<T>& in) {
  if (in.channels() != l.in_channels)
    fail(ErrorCode::ModelContractViolation, to_string(l.kind) + " expects " +
                                                std::to_string(l.in_channels) + " channels");
}

template <typename T>
Tensor<T> layer_forward(const LayerDesc& l, const T* p, const Tensor<T>& in,
                        std::vector<const Tensor<T>*>& skips) {
  switch (l.kind) {
    case LayerKind::InputNorm: {
      Tensor<T> out = in;
      for (T& v : out.values()) v = (v - T(0.5)) / T(0.5);
      return out;
    }
    case LayerKind::Conv: {
      const auto s = conv_shape(l, in);
      Tensor<T> out(l.out_channels, s.out_height(), s.out_width());
      kernels::conv2d_forward(s, in.data(), p, p + s.weight_count(), out.data());
      return out;
    }
    case LayerKind::ReLU: {
      Tensor<T> out = in;
      for (T& v : out.values()) v = v > T(0) ? v : T(0);
      return out;
    }
    case LayerKind::PReLU: {
      check_channels(l, in);
      Tensor<T> out = in;
      for (int c = 0; c < in.channels(); ++c)
        for (T& v : out.channel(c)) v = v > T(0) ? v : p[c] * v;
      return out;
    }
    case LayerKind::Affine: {
      check_channels(l, in);
      Tensor<T> out = in;
      for (int c = 0; c < in.channels(); ++c)
        for (T& v : out.channel(c)) v = p[c] * v + p[l.in_channels + c];
      return out;
    }
    case LayerKind::AvgPool: {
      const int k = l.kernel;
      const int oh = in.height() / k;
      const int ow = in.width() / k;
      Tensor<T> out(in.channels(), oh, ow);
      const T scale = T(1) / static_cast<T>(k * k);
      for (int c = 0; c < in.channels(); ++c)
        for (int y = 0; y < oh; ++y)
          for (int x = 0; x < ow; ++x) {
            T acc = 0;
            for (int dy = 0; dy < k; ++dy)
              for (int dx = 0; dx < k; ++dx) acc += in.at(c, y * k + dy, x * k + dx);
            out.at(c, y, x) = acc * scale;
          }
      return out;
    }
    case LayerKind::Linear: {
      if (static_cast<int>(in.size()) != l.in_features)
        fail(ErrorCode::ModelContractViolation, "linear expects " + std::to_string(l.in_features) +
                                                    " features, got " + std::to_string(in.size()));
      Tensor<T> out(l.out_features, 1, 1);
      const T* w = p;
      const T* b = p + static_cast<std::size_t>(l.out_features) * l.in_features;
      const T* x = in.data();
      for (int o = 0; o < l.out_features; ++o) {
        const T* row = w + static_cast<std::size_t>(o) * l.in_features;
        T acc = 0;
#pragma omp simd reduction(+ : acc)
        for (int j = 0; j < l.in_features; ++j) acc += row[j] * x[j];
        out[o] = acc + b[o];
      }
      return out;
    }
    case LayerKind::SkipSave:
      skips.push_back(&in);
      return in;
    case LayerKind::SkipAdd: {
      if (skips.empty()) fail(ErrorCode::ModelContractViolation, "skip_add without skip_save");
      const Tensor<T>& saved = *skips.back();
      skips.pop_back();
      if (!saved.same_shape(in)) fail(ErrorCode::ModelContractViolation, "skip shape mismatch");
      Tensor<T> out = in;
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += saved[i];
      return out;
    }
  }
  fail(ErrorCode::ModelContractViolation, "unhandled layer");
}

}  // namespace

template <typename T>
Network<T>::Network(std::vector<LayerDesc> layers) : layers_(std::move(layers)) {
  std::size_t total = 0;
  offsets_.reserve(layers_.size());
  for (const auto& l : layers_) {
    offsets_.push_back(total);
    total += nn::param_count(l);
  }
  params_.assign(total, T(0));
}

template <typename T>
void Network<T>::initialize(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    T* p = params_.data() + offsets_[i];
    switch (l.kind) {
      case LayerKind::Conv: {
        const std::size_t fan_in = static_cast<std::size_t>(l.in_channels) * l.kernel * l.kernel;
        const double stddev = l.init_gain * std::sqrt(2.0 / fan_in);
        const std::size_t nw = fan_in * l.out_channels;
        for (std::size_t j = 0; j < nw; ++j) p[j] = static_cast<T>(stddev * normal(rng));
        for (int j = 0; j < l.out_channels; ++j) p[nw + j] = T(0);
        break;
      }
      case LayerKind::Linear: {
        const double stddev = l.init_gain * std::sqrt(1.0 / l.in_features);
        const std::size_t nw = static_cast<std::size_t>(l.in_features) * l.out_features;
        for (std::size_t j = 0; j < nw; ++j) p[j] = static_cast<T>(stddev * normal(rng));
        for (int j = 0; j < l.out_features; ++j) p[nw + j] = T(0);
        break;
      }
      case LayerKind::PReLU:
        for (int c = 0; c < l.in_channels; ++c) p[c] = T(0.25);
        break;
      case LayerKind::Affine:
        for (int c = 0; c < l.in_channels; ++c) {
          p[c] = static_cast<T>(l.init_gain);
          p[l.in_channels + c] = T(0);
        }
        break;
      default:
        break;
    }
  }
}

template <typename T>
Tensor<T> Network<T>::forward(const Tensor<T>& input, Tape* tape) const {
  std::vector<const Tensor<T>*> skips;
  if (tape) {
    tape->activations.clear();
    tape->activations.reserve(layers_.size() + 1);
    tape->activations.push_back(input);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      // Skip pointers must stay valid, hence the reserve above.
      Tensor<T> out = layer_forward(layers_[i], params_.data() + offsets_[i], tape->activations.back(), skips);
      tape->activations.push_back(std::move(out));
    }
    return tape->activations.back();
  }
  // Without a tape only skip sources are retained.
  std::vector<Tensor<T>> kept;
  kept.reserve(layers_.size() + 1);
  kept.push_back(input);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    Tensor<T> out = layer_forward(layers_[i], params_.data() + offsets_[i], kept.back(), skips);
    if (layers_[i].kind != LayerKind::SkipSave && skips.empty() && kept.size() > 1) kept.erase(kept.begin(), kept.end() - 1);
    kept.push_back(std::move(out));
  }
  return kept.back();
}

template <typename T>
Tensor<T> Network<T>::backward(const Tape& tape, const Tensor<T>& grad_output, std::span<T> param_grad,
                               bool need_input_grad) const {
  if (tape.activations.size() != layers_.size() + 1)
    fail(ErrorCode::ModelContractViolation, "tape does not match network");
  if (!grad_output.same_shape(tape.activations.back()))
    fail(ErrorCode::ShapeMismatch, "output gradient shape mismatch");
  const bool want_params = !param_grad.empty();
  if (want_params && param_grad.size() != params_.size())
    fail(ErrorCode::ShapeMismatch, "parameter gradient size mismatch");

  std::vector<Tensor<T>> pending_skips;
  Tensor<T> grad = grad_output;
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const LayerDesc& l = layers_[li];
    const Tensor<T>& in = tape.activations[li];
    const T* p = params_.data() + offsets_[li];
    T* gp = want_params ? param_grad.data() + offsets_[li] : nullptr;
    const bool first = li == 0;
    const bool input_grad = need_input_grad || !first;
    switch (l.kind) {
      case LayerKind::InputNorm:
        for (T& v : grad.values()) v *= T(2);
        break;
      case LayerKind::Conv: {
        const auto s = conv_shape(l, in);
        Tensor<T> gin;
        if (input_grad) gin = Tensor<T>(in.channels(), in.height(), in.width());
        if (gp) {
          kernels::conv2d_backward(s, in.data(), p, grad.data(), input_grad ? gin.data() : nullptr, gp,
                                   gp + s.weight_count());
        } else {
          std::vector<T> scratch(s.weight_count() + l.out_channels, T(0));
          kernels::conv2d_backward(s, in.data(), p, grad.data(), input_grad ? gin.data() : nullptr,
                                   scratch.data(), scratch.data() + s.weight_count());
        }
        grad = std::move(gin);
        break;
      }
      case LayerKind::ReLU:
        for (std::size_t i = 0; i < grad.size(); ++i)
          if (!(in[i] > T(0))) grad[i] = T(0);
        break;
      case LayerKind::PReLU:
        for (int c = 0; c < in.channels(); ++c) {
          auto x = in.channel(c);
          auto g = grad.channel(c);
          T slope_grad = 0;
          for (std::size_t i = 0; i < x.size(); ++i) {
            if (!(x[i] > T(0))) {
              slope_grad += x[i] * g[i];
              g[i] *= p[c];
            }
          }
          if (gp) gp[c] += slope_grad;
        }
        break;
      case LayerKind::Affine:
        for (int c = 0; c < in.channels(); ++c) {
          auto x = in.channel(c);
          auto g = grad.channel(c);
          T gs = 0, gb = 0;
          for (std::size_t i = 0; i < x.size(); ++i) {
            gs += x[i] * g[i];
            gb += g[i];
            g[i] *= p[c];
          }
          if (gp) {
            gp[c] += gs;
            gp[l.in_channels + c] += gb;
          }
        }
        break;
      case LayerKind::AvgPool: {
        const int k = l.kernel;
        Tensor<T> gin(in.channels(), in.height(), in.width());
        const T scale = T(1) / static_cast<T>(k * k);
        for (int c = 0; c < in.channels(); ++c)
          for (int y = 0; y < grad.height(); ++y)
            for (int x = 0; x < grad.width(); ++x) {
              const T g = grad.at(c, y, x) * scale;
              for (int dy = 0; dy < k; ++dy)
                for (int dx = 0; dx < k; ++dx) gin.at(c, y * k + dy, x * k + dx) = g;
            }
        grad = std::move(gin);
        break;
      }
      case LayerKind::Linear: {
        const T* w = p;
        const T* x = in.data();
        if (gp) {
          T* gw = gp;
          T* gb = gp + static_cast<std::size_t>(l.out_features) * l.in_features;
          for (int o = 0; o < l.out_features; ++o) {
            const T g = grad[o];
            T* row = gw + static_cast<std::size_t>(o) * l.in_features;
#pragma omp simd
            for (int j = 0; j < l.in_features; ++j) row[j] += g * x[j];
            gb[o] += g;
          }
        }
        Tensor<T> gin;
        if (input_grad) {
          gin = Tensor<T>(in.channels(), in.height(), in.width());
          T* gx = gin.data();
          for (int o = 0; o < l.out_features; ++o) {
            const T g = grad[o];
            const T* row = w + static_cast<std::size_t>(o) * l.in_features;
#pragma omp simd
            for (int j = 0; j < l.in_features; ++j) gx[j] += g * row[j];
          }
        }
        grad = std::move(gin);
        break;
      }
      case LayerKind::SkipAdd:
        pending_skips.push_back(grad);
        break;
      case LayerKind::SkipSave: {
        if (pending_skips.empty()) fail(ErrorCode::ModelContractViolation, "unbalanced skip connections");
        const Tensor<T>& extra = pending_skips.back();
        for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += extra[i];
        pending_skips.pop_back();
        break;
      }
    }
  }
  return grad;
}

template class Network<float>;
template class Network<double>;

}  // namespace lowkey::nn
