#pragma once

// Data-parallel inner loops used by every numeric module. Each kernel has a
// serial reference and an OpenMP variant with identical signatures. The
// OpenMP variants partition work over outputs and keep the serial
// accumulation order, so both backends produce bit-identical results.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace lowkey::kernels {

enum class Backend { Serial, OpenMP };

Backend default_backend() noexcept;
void set_default_backend(Backend backend) noexcept;

struct ConvShape {
  int in_channels = 0;
  int in_height = 0;
  int in_width = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  int out_height() const noexcept { return (in_height + 2 * pad - kernel) / stride + 1; }
  int out_width() const noexcept { return (in_width + 2 * pad - kernel) / stride + 1; }
  std::size_t patch() const noexcept {
    return static_cast<std::size_t>(in_channels) * kernel * kernel;
  }
  std::size_t weight_count() const noexcept { return out_channels * patch(); }
};

// Precomputed bilinear sampling geometry: for every output pixel, four source
// indices (−1 when outside the source) and their weights.
struct WarpPlan {
  int src_height = 0;
  int src_width = 0;
  int out_height = 0;
  int out_width = 0;
  std::vector<std::int32_t> index;  // 4 per output pixel
  std::vector<double> weight;       // 4 per output pixel
};

// `inverse` maps output (x, y) to source (x, y) as a row-major 2x3 matrix.
WarpPlan make_warp_plan(int src_height, int src_width, int out_height, int out_width,
                        const double (&inverse)[6]);

// Half-sample symmetric reflection ("d c b a | a b c d").
int reflect_index(int i, int n) noexcept;

namespace serial {
template <typename T>
void conv2d_forward(const ConvShape& s, const T* in, const T* weight, const T* bias, T* out);
// Accumulates into grad_weight / grad_bias; writes grad_in when non-null.
template <typename T>
void conv2d_backward(const ConvShape& s, const T* in, const T* weight, const T* grad_out,
                     T* grad_in, T* grad_weight, T* grad_bias);
template <typename T>
void smooth_separable(int channels, int height, int width, std::span<const double> taps,
                      const T* in, T* out);
template <typename T>
void smooth_separable_adjoint(int channels, int height, int width, std::span<const double> taps,
                              const T* grad_out, T* grad_in);
template <typename T>
void warp_forward(const WarpPlan& plan, int channels, const T* in, T* out);
template <typename T>
void warp_adjoint(const WarpPlan& plan, int channels, const T* grad_out, T* grad_in);
void squared_l2_rows(std::span<const float> query, std::span<const float> rows, std::size_t dim,
                     std::span<double> out);
void dot_rows(std::span<const float> query, std::span<const float> rows, std::size_t dim,
              std::span<double> out);
}  // namespace serial

namespace omp {
template <typename T>
void conv2d_forward(const ConvShape& s, const T* in, const T* weight, const T* bias, T* out);
template <typename T>
void conv2d_backward(const ConvShape& s, const T* in, const T* weight, const T* grad_out,
                     T* grad_in, T* grad_weight, T* grad_bias);
template <typename T>
void smooth_separable(int channels, int height, int width, std::span<const double> taps,
                      const T* in, T* out);
template <typename T>
void smooth_separable_adjoint(int channels, int height, int width, std::span<const double> taps,
                              const T* grad_out, T* grad_in);
template <typename T>
void warp_forward(const WarpPlan& plan, int channels, const T* in, T* out);
template <typename T>
void warp_adjoint(const WarpPlan& plan, int channels, const T* grad_out, T* grad_in);
void squared_l2_rows(std::span<const float> query, std::span<const float> rows, std::size_t dim,
                     std::span<double> out);
void dot_rows(std::span<const float> query, std::span<const float> rows, std::size_t dim,
              std::span<double> out);
}  // namespace omp

// Dispatch on default_backend().
template <typename T>
void conv2d_forward(const ConvShape& s, const T* in, const T* weight, const T* bias, T* out) {
  if (default_backend() == Backend::OpenMP)
    omp::conv2d_forward(s, in, weight, bias, out);
  else
    serial::conv2d_forward(s, in, weight, bias, out);
}
template <typename T>
void conv2d_backward(const ConvShape& s, const T* in, const T* weight, const T* grad_out,
                     T* grad_in, T* grad_weight, T* grad_bias) {
  if (default_backend() == Backend::OpenMP)
    omp::conv2d_backward(s, in, weight, grad_out, grad_in, grad_weight, grad_bias);
  else
    serial::conv2d_backward(s, in, weight, grad_out, grad_in, grad_weight, grad_bias);
}
template <typename T>
void smooth_separable(int channels, int height, int width, std::span<const double> taps,
                      const T* in, T* out) {
  if (default_backend() == Backend::OpenMP)
    omp::smooth_separable(channels, height, width, taps, in, out);
  else
    serial::smooth_separable(channels, height, width, taps, in, out);
}
template <typename T>
void smooth_separable_adjoint(int channels, int height, int width, std::span<const double> taps,
                              const T* grad_out, T* grad_in) {
  if (default_backend() == Backend::OpenMP)
    omp::smooth_separable_adjoint(channels, height, width, taps, grad_out, grad_in);
  else
    serial::smooth_separable_adjoint(channels, height, width, taps, grad_out, grad_in);
}
template <typename T>
void warp_forward(const WarpPlan& plan, int channels, const T* in, T* out) {
  if (default_backend() == Backend::OpenMP)
    omp::warp_forward(plan, channels, in, out);
  else
    serial::warp_forward(plan, channels, in, out);
}
template <typename T>
void warp_adjoint(const WarpPlan& plan, int channels, const T* grad_out, T* grad_in) {
  if (default_backend() == Backend::OpenMP)
    omp::warp_adjoint(plan, channels, grad_out, grad_in);
  else
    serial::warp_adjoint(plan, channels, grad_out, grad_in);
}
inline void squared_l2_rows(std::span<const float> query, std::span<const float> rows,
                            std::size_t dim, std::span<double> out) {
  if (default_backend() == Backend::OpenMP)
    omp::squared_l2_rows(query, rows, dim, out);
  else
    serial::squared_l2_rows(query, rows, dim, out);
}
inline void dot_rows(std::span<const float> query, std::span<const float> rows, std::size_t dim,
                     std::span<double> out) {
  if (default_backend() == Backend::OpenMP)
    omp::dot_rows(query, rows, dim, out);
  else
    serial::dot_rows(query, rows, dim, out);
}

}  // namespace lowkey::kernels
