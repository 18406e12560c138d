#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "lowkey/tensor.hpp"

namespace lowkey::imaging {

// Three-channel RGB image, planar, every value in [0, 1].
template <typename T>
class BasicImage {
 public:
  static constexpr int kChannels = 3;

  BasicImage() = default;
  BasicImage(int height, int width, T fill = T(0));

  // Throws ShapeMismatch for a malformed shape and ConfigError for values
  // outside [0, 1]; use clip_to_range for unconstrained data.
  static BasicImage from_tensor(Tensor<T> pixels);

  int height() const noexcept { return pixels_.height(); }
  int width() const noexcept { return pixels_.width(); }
  bool empty() const noexcept { return pixels_.size() == 0; }
  bool same_shape(const BasicImage& other) const noexcept { return pixels_.same_shape(other.pixels_); }

  T at(int c, int y, int x) const { return pixels_.at(c, y, x); }
  // Stores a clamped value.
  void set(int c, int y, int x, T value);

  const Tensor<T>& tensor() const noexcept { return pixels_; }
  std::span<const T> values() const noexcept { return pixels_.values(); }

  template <typename U>
  BasicImage<U> cast() const {
    BasicImage<U> out;
    out.pixels_ = pixels_.template cast<U>();
    return out;
  }

  bool operator==(const BasicImage& other) const = default;

 private:
  template <typename U>
  friend class BasicImage;
  template <typename U>
  friend BasicImage<U> clip_to_range(Tensor<U> pixels);

  Tensor<T> pixels_;
};

using ImageTensor = BasicImage<float>;

// Normalized separable Gaussian. `window` is odd; the 2-D weights are the
// outer product of the 1-D taps.
class SmoothingKernel {
 public:
  // Throws InvalidKernel for sigma <= 0 or a window that is not a positive odd integer.
  SmoothingKernel(double sigma, int window);

  static SmoothingKernel identity() { return SmoothingKernel(1.0, 1); }
  // Untruncated kernel: window = 2 * ceil(3 sigma) + 1.
  static SmoothingKernel full_support(double sigma);

  double sigma() const noexcept { return sigma_; }
  int window() const noexcept { return window_; }
  std::span<const double> taps() const noexcept { return taps_; }
  std::vector<double> weights_2d() const;

 private:
  double sigma_;
  int window_;
  std::vector<double> taps_;
};

template <typename T>
BasicImage<T> clip_to_range(Tensor<T> pixels);

template <typename T>
BasicImage<T> gaussian_smooth(const BasicImage<T>& img, const SmoothingKernel& kernel);

// Linear smoothing on an unconstrained tensor, and its adjoint.
template <typename T>
Tensor<T> smooth_tensor(const Tensor<T>& in, const SmoothingKernel& kernel);
template <typename T>
Tensor<T> smooth_tensor_adjoint(const Tensor<T>& grad_out, const SmoothingKernel& kernel);

// Rounds every value to the nearest multiple of 1/255.
ImageTensor quantize_8bit(const ImageTensor& img);

std::vector<std::uint8_t> encode_png(const ImageTensor& img);
// Throws InvalidQuality unless 1 <= quality <= 100.
std::vector<std::uint8_t> encode_jpeg(const ImageTensor& img, int quality);
// Sniffs PNG or JPEG. Throws DecodeError on anything else or corrupt data.
ImageTensor decode(std::span<const std::uint8_t> bytes);

ImageTensor read_image(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const ImageTensor& img);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

ImageTensor resize_bilinear(const ImageTensor& img, int height, int width);

// 64-bit difference hash over a 9x8 grayscale thumbnail.
std::uint64_t difference_hash(const ImageTensor& img);
int hamming_distance(std::uint64_t a, std::uint64_t b) noexcept;

}  // namespace lowkey::imaging
