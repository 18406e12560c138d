#include "lowkey/kernels.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

namespace lowkey::kernels {

namespace {

std::atomic<Backend> g_backend{Backend::OpenMP};

// Shared units of work. Both backends call exactly these, so the arithmetic
// (and therefore the rounding) is identical regardless of scheduling.

template <typename T>
inline void axpy(T a, const T* x, T* y, std::size_t n) {
#pragma omp simd
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

template <typename T>
inline T dot(const T* a, const T* b, std::size_t n) {
  T acc = 0;
#pragma omp simd reduction(+ : acc)
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
void im2col_channel(const ConvShape& s, const T* in, int ic, T* col) {
  const int oh = s.out_height();
  const int ow = s.out_width();
  const std::size_t p = static_cast<std::size_t>(oh) * ow;
  const T* plane = in + static_cast<std::size_t>(ic) * s.in_height * s.in_width;
  for (int ky = 0; ky < s.kernel; ++ky) {
    for (int kx = 0; kx < s.kernel; ++kx) {
      T* row = col + ((static_cast<std::size_t>(ic) * s.kernel + ky) * s.kernel + kx) * p;
      for (int oy = 0; oy < oh; ++oy) {
        const int iy = oy * s.stride - s.pad + ky;
        T* dst = row + static_cast<std::size_t>(oy) * ow;
        if (iy < 0 || iy >= s.in_height) {
          std::fill(dst, dst + ow, T(0));
          continue;
        }
        const T* src = plane + static_cast<std::size_t>(iy) * s.in_width;
        for (int ox = 0; ox < ow; ++ox) {
          const int ix = ox * s.stride - s.pad + kx;
          dst[ox] = (ix >= 0 && ix < s.in_width) ? src[ix] : T(0);
        }
      }
    }
  }
}

template <typename T>
void col2im_channel(const ConvShape& s, const T* col, int ic, T* grad_in) {
  const int oh = s.out_height();
  const int ow = s.out_width();
  const std::size_t p = static_cast<std::size_t>(oh) * ow;
  T* plane = grad_in + static_cast<std::size_t>(ic) * s.in_height * s.in_width;
  std::fill(plane, plane + static_cast<std::size_t>(s.in_height) * s.in_width, T(0));
  for (int ky = 0; ky < s.kernel; ++ky) {
    for (int kx = 0; kx < s.kernel; ++kx) {
      const T* row = col + ((static_cast<std::size_t>(ic) * s.kernel + ky) * s.kernel + kx) * p;
      for (int oy = 0; oy < oh; ++oy) {
        const int iy = oy * s.stride - s.pad + ky;
        if (iy < 0 || iy >= s.in_height) continue;
        const T* src = row + static_cast<std::size_t>(oy) * ow;
        T* dst = plane + static_cast<std::size_t>(iy) * s.in_width;
        for (int ox = 0; ox < ow; ++ox) {
          const int ix = ox * s.stride - s.pad + kx;
          if (ix >= 0 && ix < s.in_width) dst[ix] += src[ox];
        }
      }
    }
  }
}

template <typename T>
void conv_forward_channel(const ConvShape& s, const T* col, const T* weight, const T* bias, int oc,
                          T* out) {
  const std::size_t p = static_cast<std::size_t>(s.out_height()) * s.out_width();
  const std::size_t k = s.patch();
  T* dst = out + oc * p;
  std::fill(dst, dst + p, bias ? bias[oc] : T(0));
  const T* w = weight + oc * k;
  for (std::size_t j = 0; j < k; ++j) axpy(w[j], col + j * p, dst, p);
}

template <typename T>
void conv_weight_grad_channel(const ConvShape& s, const T* col, const T* grad_out, int oc,
                              T* grad_weight, T* grad_bias) {
  const std::size_t p = static_cast<std::size_t>(s.out_height()) * s.out_width();
  const std::size_t k = s.patch();
  const T* g = grad_out + oc * p;
  T* gw = grad_weight + oc * k;
  for (std::size_t j = 0; j < k; ++j) gw[j] += dot(g, col + j * p, p);
  if (grad_bias) {
    T acc = 0;
    for (std::size_t i = 0; i < p; ++i) acc += g[i];
    grad_bias[oc] += acc;
  }
}

template <typename T>
void conv_col_grad_row(const ConvShape& s, const T* weight, const T* grad_out, std::size_t j,
                       T* gcol) {
  const std::size_t p = static_cast<std::size_t>(s.out_height()) * s.out_width();
  const std::size_t k = s.patch();
  T* dst = gcol + j * p;
  std::fill(dst, dst + p, T(0));
  for (int oc = 0; oc < s.out_channels; ++oc) axpy(weight[oc * k + j], grad_out + oc * p, dst, p);
}

template <typename T>
std::vector<T>& scratch(int slot) {
  thread_local std::vector<T> buffers[2];
  return buffers[slot];
}

// One output row of a horizontal pass, or one output row of a vertical pass.
template <typename T>
void smooth_row_h(int width, std::span<const double> taps, const T* in, T* out) {
  const int r = static_cast<int>(taps.size()) / 2;
  for (int x = 0; x < width; ++x) {
    double acc = 0;
    for (int k = -r; k <= r; ++k) acc += taps[k + r] * in[reflect_index(x + k, width)];
    out[x] = static_cast<T>(acc);
  }
}

template <typename T>
void smooth_row_v(int height, int width, std::span<const double> taps, const T* plane, int y,
                  T* out) {
  const int r = static_cast<int>(taps.size()) / 2;
  for (int x = 0; x < width; ++x) {
    double acc = 0;
    for (int k = -r; k <= r; ++k)
      acc += taps[k + r] * plane[static_cast<std::size_t>(reflect_index(y + k, height)) * width + x];
    out[x] = static_cast<T>(acc);
  }
}

// Adjoint of one channel: transpose of (vertical o horizontal).
template <typename T>
void smooth_adjoint_channel(int height, int width, std::span<const double> taps, const T* grad_out,
                            T* grad_in) {
  const int r = static_cast<int>(taps.size()) / 2;
  const std::size_t n = static_cast<std::size_t>(height) * width;
  std::vector<double> mid(n, 0.0);
  for (int y = 0; y < height; ++y) {
    for (int k = -r; k <= r; ++k) {
      const double w = taps[k + r];
      double* dst = mid.data() + static_cast<std::size_t>(reflect_index(y + k, height)) * width;
      const T* src = grad_out + static_cast<std::size_t>(y) * width;
      for (int x = 0; x < width; ++x) dst[x] += w * src[x];
    }
  }
  std::vector<double> acc(width);
  for (int y = 0; y < height; ++y) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const double* src = mid.data() + static_cast<std::size_t>(y) * width;
    for (int x = 0; x < width; ++x)
      for (int k = -r; k <= r; ++k) acc[reflect_index(x + k, width)] += taps[k + r] * src[x];
    T* dst = grad_in + static_cast<std::size_t>(y) * width;
    for (int x = 0; x < width; ++x) dst[x] = static_cast<T>(acc[x]);
  }
}

template <typename T>
void warp_pixel(const WarpPlan& plan, int channels, const T* in, std::size_t i, T* out) {
  const std::size_t src_plane = static_cast<std::size_t>(plan.src_height) * plan.src_width;
  const std::size_t out_plane = static_cast<std::size_t>(plan.out_height) * plan.out_width;
  for (int c = 0; c < channels; ++c) {
    double acc = 0;
    for (int n = 0; n < 4; ++n) {
      const std::int32_t idx = plan.index[4 * i + n];
      if (idx >= 0) acc += plan.weight[4 * i + n] * in[c * src_plane + idx];
    }
    out[c * out_plane + i] = static_cast<T>(acc);
  }
}

template <typename T>
void warp_adjoint_channel(const WarpPlan& plan, const T* grad_out, T* grad_in) {
  const std::size_t src_plane = static_cast<std::size_t>(plan.src_height) * plan.src_width;
  const std::size_t out_plane = static_cast<std::size_t>(plan.out_height) * plan.out_width;
  std::vector<double> acc(src_plane, 0.0);
  for (std::size_t i = 0; i < out_plane; ++i) {
    const double g = grad_out[i];
    if (g == 0) continue;
    for (int n = 0; n < 4; ++n) {
      const std::int32_t idx = plan.index[4 * i + n];
      if (idx >= 0) acc[idx] += plan.weight[4 * i + n] * g;
    }
  }
  for (std::size_t i = 0; i < src_plane; ++i) grad_in[i] = static_cast<T>(acc[i]);
}

inline double row_sq_l2(const float* q, const float* r, std::size_t dim) {
  double acc = 0;
  for (std::size_t j = 0; j < dim; ++j) {
    const double d = static_cast<double>(q[j]) - r[j];
    acc += d * d;
  }
  return acc;
}

inline double row_dot(const float* q, const float* r, std::size_t dim) {
  double acc = 0;
  for (std::size_t j = 0; j < dim; ++j) acc += static_cast<double>(q[j]) * r[j];
  return acc;
}

}  // namespace

Backend default_backend() noexcept { return g_backend.load(std::memory_order_relaxed); }
void set_default_backend(Backend backend) noexcept {
  g_backend.store(backend, std::memory_order_relaxed);
}

int reflect_index(int i, int n) noexcept {
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

WarpPlan make_warp_plan(int src_height, int src_width, int out_height, int out_width,
                        const double (&inverse)[6]) {
  WarpPlan plan;
  plan.src_height = src_height;
  plan.src_width = src_width;
  plan.out_height = out_height;
  plan.out_width = out_width;
  const std::size_t n = static_cast<std::size_t>(out_height) * out_width;
  plan.index.assign(4 * n, -1);
  plan.weight.assign(4 * n, 0.0);
  for (int y = 0; y < out_height; ++y) {
    for (int x = 0; x < out_width; ++x) {
      const double sx = inverse[0] * x + inverse[1] * y + inverse[2];
      const double sy = inverse[3] * x + inverse[4] * y + inverse[5];
      const double fx0 = std::floor(sx);
      const double fy0 = std::floor(sy);
      const double fx = sx - fx0;
      const double fy = sy - fy0;
      const int x0 = static_cast<int>(fx0);
      const int y0 = static_cast<int>(fy0);
      const std::size_t i = static_cast<std::size_t>(y) * out_width + x;
      const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
      const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
      const double ws[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      for (int k = 0; k < 4; ++k) {
        if (ws[k] == 0.0) continue;
        if (xs[k] < 0 || xs[k] >= src_width || ys[k] < 0 || ys[k] >= src_height) continue;
        plan.index[4 * i + k] = ys[k] * src_width + xs[k];
        plan.weight[4 * i + k] = ws[k];
      }
    }
  }
  return plan;
}

// ---------------------------------------------------------------- serial

namespace serial {

template <typename T>
void conv2d_forward(const ConvShape& s, const T* in, const T* weight, const T* bias, T* out) {
  auto& col = scratch<T>(0);
  col.resize(s.patch() * s.out_height() * s.out_width());
  for (int ic = 0; ic < s.in_channels; ++ic) im2col_channel(s, in, ic, col.data());
  for (int oc = 0; oc < s.out_channels; ++oc) conv_forward_channel(s, col.data(), weight, bias, oc, out);
}

template <typename T>
void conv2d_backward(const ConvShape& s, const T* in, const T* weight, const T* grad_out,
                     T* grad_in, T* grad_weight, T* grad_bias) {
  const std::size_t p = static_cast<std::size_t>(s.out_height()) * s.out_width();
  auto& col = scratch<T>(0);
  col.resize(s.patch() * p);
  for (int ic = 0; ic < s.in_channels; ++ic) im2col_channel(s, in, ic, col.data());
  for (int oc = 0; oc < s.out_channels; ++oc)
    conv_weight_grad_channel(s, col.data(), grad_out, oc, grad_weight, grad_bias);
  if (!grad_in) return;
  auto& gcol = scratch<T>(1);
  gcol.resize(s.patch() * p);
  for (std::size_t j = 0; j < s.patch(); ++j) conv_col_grad_row(s, weight, grad_out, j, gcol.data());
  for (int ic = 0; ic < s.in_channels; ++ic) col2im_channel(s, gcol.data(), ic, grad_in);
}

template <typename T>
void smooth_separable(int channels, int height, int width, std::span<const double> taps,
                      const T* in, T* out) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  std::vector<T> mid(plane * channels);
  for (int row = 0; row < channels * height; ++row)
    smooth_row_h(width, taps, in + static_cast<std::size_t>(row) * width,
                 mid.data() + static_cast<std::size_t>(row) * width);
  for (int row = 0; row < channels * height; ++row) {
    const int c = row / height;
    const int y = row % height;
    smooth_row_v(height, width, taps, mid.data() + c * plane, y,
                 out + static_cast<std::size_t>(row) * width);
  }
}

template <typename T>
void smooth_separable_adjoint(int channels, int height, int width, std::span<const double> taps,
                              const T* grad_out, T* grad_in) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (int c = 0; c < channels; ++c)
    smooth_adjoint_channel(height, width, taps, grad_out + c * plane, grad_in + c * plane);
}

template <typename T>
void warp_forward(const WarpPlan& plan, int channels, const T* in, T* out) {
  const std::size_t n = static_cast<std::size_t>(plan.out_height) * plan.out_width;
  for (std::size_t i = 0; i < n; ++i) warp_pixel(plan, channels, in, i, out);
}

template <typename T>
void warp_adjoint(const WarpPlan& plan, int channels, const T* grad_out, T* grad_in) {
  const std::size_t src_plane = static_cast<std::size_t>(plan.src_height) * plan.src_width;
  const std::size_t out_plane = static_cast<std::size_t>(plan.out_height) * plan.out_width;
  for (int c = 0; c < channels; ++c)
    warp_adjoint_channel(plan, grad_out + c * out_plane, grad_in + c * src_plane);
}

void squared_l2_rows(std::span<const float> query, std::span<const float> rows, std::size_t dim,
                     std::span<double> out) {
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = row_sq_l2(query.data(), rows.data() + i * dim, dim);
}

void dot_rows(std::span<const float> query, std::span<const float> rows, std::size_t dim,
              std::span<double> out) {
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = row_dot(query.data(), rows.data() + i * dim, dim);
}

}  // namespace serial

// ---------------------------------------------------------------- openmp

namespace omp {

template <typename T>
void conv2d_forward(const ConvShape& s, const T* in, const T* weight, const T* bias, T* out) {
  auto& col = scratch<T>(0);
  col.resize(s.patch() * s.out_height() * s.out_width());
  T* c = col.data();
#pragma omp parallel
  {
#pragma omp for schedule(static)
    for (int ic = 0; ic < s.in_channels; ++ic) im2col_channel(s, in, ic, c);
#pragma omp for schedule(static)
    for (int oc = 0; oc < s.out_channels; ++oc) conv_forward_channel(s, c, weight, bias, oc, out);
  }
}

template <typename T>
void conv2d_backward(const ConvShape& s, const T* in, const T* weight, const T* grad_out,
                     T* grad_in, T* grad_weight, T* grad_bias) {
  const std::size_t p = static_cast<std::size_t>(s.out_height()) * s.out_width();
  auto& col = scratch<T>(0);
  col.resize(s.patch() * p);
  auto& gcol = scratch<T>(1);
  if (grad_in) gcol.resize(s.patch() * p);
  T* c = col.data();
  T* gc = gcol.data();
  const long patch = static_cast<long>(s.patch());
#pragma omp parallel
  {
#pragma omp for schedule(static)
    for (int ic = 0; ic < s.in_channels; ++ic) im2col_channel(s, in, ic, c);
#pragma omp for schedule(static)
    for (int oc = 0; oc < s.out_channels; ++oc)
      conv_weight_grad_channel(s, c, grad_out, oc, grad_weight, grad_bias);
    if (grad_in) {
#pragma omp for schedule(static)
      for (long j = 0; j < patch; ++j) conv_col_grad_row(s, weight, grad_out, j, gc);
#pragma omp for schedule(static)
      for (int ic = 0; ic < s.in_channels; ++ic) col2im_channel(s, gc, ic, grad_in);
    }
  }
}

template <typename T>
void smooth_separable(int channels, int height, int width, std::span<const double> taps,
                      const T* in, T* out) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  std::vector<T> mid(plane * channels);
  T* m = mid.data();
  const int rows = channels * height;
#pragma omp parallel
  {
#pragma omp for schedule(static)
    for (int row = 0; row < rows; ++row)
      smooth_row_h(width, taps, in + static_cast<std::size_t>(row) * width,
                   m + static_cast<std::size_t>(row) * width);
#pragma omp for schedule(static)
    for (int row = 0; row < rows; ++row) {
      const int c = row / height;
      const int y = row % height;
      smooth_row_v(height, width, taps, m + c * plane, y, out + static_cast<std::size_t>(row) * width);
    }
  }
}

template <typename T>
void smooth_separable_adjoint(int channels, int height, int width, std::span<const double> taps,
                              const T* grad_out, T* grad_in) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
#pragma omp parallel for schedule(static)
  for (int c = 0; c < channels; ++c)
    smooth_adjoint_channel(height, width, taps, grad_out + c * plane, grad_in + c * plane);
}

template <typename T>
void warp_forward(const WarpPlan& plan, int channels, const T* in, T* out) {
  const long n = static_cast<long>(plan.out_height) * plan.out_width;
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i) warp_pixel(plan, channels, in, static_cast<std::size_t>(i), out);
}

template <typename T>
void warp_adjoint(const WarpPlan& plan, int channels, const T* grad_out, T* grad_in) {
  const std::size_t src_plane = static_cast<std::size_t>(plan.src_height) * plan.src_width;
  const std::size_t out_plane = static_cast<std::size_t>(plan.out_height) * plan.out_width;
#pragma omp parallel for schedule(static)
  for (int c = 0; c < channels; ++c)
    warp_adjoint_channel(plan, grad_out + c * out_plane, grad_in + c * src_plane);
}

void squared_l2_rows(std::span<const float> query, std::span<const float> rows, std::size_t dim,
                     std::span<double> out) {
  const long n = static_cast<long>(out.size());
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i) out[i] = row_sq_l2(query.data(), rows.data() + i * dim, dim);
}

void dot_rows(std::span<const float> query, std::span<const float> rows, std::size_t dim,
              std::span<double> out) {
  const long n = static_cast<long>(out.size());
#pragma omp parallel for schedule(static)
  for (long i = 0; i < n; ++i) out[i] = row_dot(query.data(), rows.data() + i * dim, dim);
}

}  // namespace omp

#define LOWKEY_INSTANTIATE(NS, T)                                                              \
  template void NS::conv2d_forward<T>(const ConvShape&, const T*, const T*, const T*, T*);     \
  template void NS::conv2d_backward<T>(const ConvShape&, const T*, const T*, const T*, T*, T*, \
                                       T*);                                                    \
  template void NS::smooth_separable<T>(int, int, int, std::span<const double>, const T*, T*); \
  template void NS::smooth_separable_adjoint<T>(int, int, int, std::span<const double>,        \
                                                const T*, T*);                                 \
  template void NS::warp_forward<T>(const WarpPlan&, int, const T*, T*);                       \
  template void NS::warp_adjoint<T>(const WarpPlan&, int, const T*, T*);

LOWKEY_INSTANTIATE(serial, float)
LOWKEY_INSTANTIATE(serial, double)
LOWKEY_INSTANTIATE(omp, float)
LOWKEY_INSTANTIATE(omp, double)
#undef LOWKEY_INSTANTIATE

}  // namespace lowkey::kernels
