#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lowkey/tensor.hpp"

// Minimal sequential network with explicit reverse-mode passes. Layers are
// stateless: a forward pass records its activations on a caller-owned Tape,
// so a loaded network can serve concurrent forward/backward calls.
namespace lowkey::nn {

enum class LayerKind {
  InputNorm,  // (x - 0.5) / 0.5
  Conv,
  ReLU,
  PReLU,
  Affine,     // per-channel scale and shift
  AvgPool,    // non-overlapping k x k
  Linear,     // flattens its input
  SkipSave,   // pushes the current activation
  SkipAdd,    // adds the most recently pushed activation
};

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

struct LayerDesc {
  LayerKind kind = LayerKind::ReLU;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int pad = 0;
  int in_features = 0;   // Linear
  int out_features = 0;  // Linear
  double init_gain = 1.0;

  bool operator==(const LayerDesc&) const = default;
};

std::size_t param_count(const LayerDesc& layer);

template <typename T>
class Network {
 public:
  struct Tape {
    std::vector<Tensor<T>> activations;  // input of layer i; back() is the output
  };

  Network() = default;
  explicit Network(std::vector<LayerDesc> layers);

  const std::vector<LayerDesc>& layers() const noexcept { return layers_; }
  std::size_t param_count() const noexcept { return params_.size(); }
  std::span<T> params() noexcept { return params_; }
  std::span<const T> params() const noexcept { return params_; }
  std::size_t param_offset(std::size_t layer) const { return offsets_.at(layer); }

  // He-style initialisation from a fixed seed.
  void initialize(std::uint64_t seed);

  Tensor<T> forward(const Tensor<T>& input, Tape* tape = nullptr) const;

  // Reverse pass from d(loss)/d(output). Parameter gradients are accumulated
  // into `param_grad` when it is non-empty. Returns d(loss)/d(input).
  Tensor<T> backward(const Tape& tape, const Tensor<T>& grad_output, std::span<T> param_grad = {},
                     bool need_input_grad = true) const;

  template <typename U>
  Network<U> cast() const {
    Network<U> out(layers_);
    auto dst = out.params();
    for (std::size_t i = 0; i < params_.size(); ++i) dst[i] = static_cast<U>(params_[i]);
    return out;
  }

 private:
  std::vector<LayerDesc> layers_;
  std::vector<std::size_t> offsets_;
  std::vector<T> params_;
};

extern template class Network<float>;
extern template class Network<double>;

}  // namespace lowkey::nn
