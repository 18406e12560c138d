#include <doctest.h>

#include <cstring>
#include <random>
#include <vector>

#include "lowkey/kernels.hpp"

using namespace lowkey::kernels;

namespace {

template <typename T>
std::vector<T> random_vec(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(u(rng));
  return v;
}

template <typename T>
bool bit_equal(const std::vector<T>& a, const std::vector<T>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0;
}

const ConvShape kShapes[] = {
    {3, 9, 11, 5, 3, 1, 1}, {4, 16, 16, 8, 3, 2, 1}, {2, 7, 5, 3, 5, 2, 2}, {6, 6, 6, 4, 1, 1, 0}, {3, 12, 10, 2, 7, 2, 3},
};

}  // namespace

TEST_CASE("reflect_index mirrors with the edge sample repeated") {
  CHECK(reflect_index(-1, 4) == 0);
  CHECK(reflect_index(-2, 4) == 1);
  CHECK(reflect_index(4, 4) == 3);
  CHECK(reflect_index(5, 4) == 2);
  CHECK(reflect_index(9, 4) == 1);
  CHECK(reflect_index(0, 1) == 0);
  CHECK(reflect_index(-7, 1) == 0);
  for (int i = -20; i < 20; ++i) {
    const int r = reflect_index(i, 5);
    CHECK(r >= 0);
    CHECK(r < 5);
  }
}

TEST_CASE("conv2d forward matches a direct loop") {
  for (const auto& s : kShapes) {
    const auto in = random_vec<double>(static_cast<std::size_t>(s.in_channels) * s.in_height * s.in_width, 1);
    const auto w = random_vec<double>(s.weight_count(), 2);
    const auto b = random_vec<double>(s.out_channels, 3);
    std::vector<double> out(static_cast<std::size_t>(s.out_channels) * s.out_height() * s.out_width());
    serial::conv2d_forward(s, in.data(), w.data(), b.data(), out.data());
    double worst = 0;
    for (int o = 0; o < s.out_channels; ++o)
      for (int y = 0; y < s.out_height(); ++y)
        for (int x = 0; x < s.out_width(); ++x) {
          double acc = b[o];
          for (int c = 0; c < s.in_channels; ++c)
            for (int ky = 0; ky < s.kernel; ++ky)
              for (int kx = 0; kx < s.kernel; ++kx) {
                const int iy = y * s.stride - s.pad + ky, ix = x * s.stride - s.pad + kx;
                if (iy < 0 || ix < 0 || iy >= s.in_height || ix >= s.in_width) continue;
                acc += w[((o * s.in_channels + c) * s.kernel + ky) * s.kernel + kx] *
                       in[(c * s.in_height + iy) * s.in_width + ix];
              }
          worst = std::max(worst, std::abs(acc - out[(o * s.out_height() + y) * s.out_width() + x]));
        }
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("conv2d backward is the adjoint of forward") {
  for (const auto& s : kShapes) {
    const std::size_t nin = static_cast<std::size_t>(s.in_channels) * s.in_height * s.in_width;
    const std::size_t nout = static_cast<std::size_t>(s.out_channels) * s.out_height() * s.out_width();
    const auto in = random_vec<double>(nin, 4);
    const auto w = random_vec<double>(s.weight_count(), 5);
    const std::vector<double> zero_bias(s.out_channels, 0.0);
    const auto gy = random_vec<double>(nout, 6);
    std::vector<double> out(nout), gx(nin), gw(s.weight_count(), 0.0), gb(s.out_channels, 0.0);
    serial::conv2d_forward(s, in.data(), w.data(), zero_bias.data(), out.data());
    serial::conv2d_backward(s, in.data(), w.data(), gy.data(), gx.data(), gw.data(), gb.data());
    // <conv(x), gy> = <x, conv^T gy> = <w, dW>.
    double lhs = 0, rhs = 0, rw = 0, bias_sum = 0;
    for (std::size_t i = 0; i < nout; ++i) lhs += out[i] * gy[i];
    for (std::size_t i = 0; i < nin; ++i) rhs += in[i] * gx[i];
    for (std::size_t i = 0; i < w.size(); ++i) rw += w[i] * gw[i];
    for (std::size_t i = 0; i < nout; ++i) bias_sum += gy[i];
    double gb_sum = 0;
    for (double v : gb) gb_sum += v;
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-10));
    CHECK(lhs == doctest::Approx(rw).epsilon(1e-10));
    CHECK(gb_sum == doctest::Approx(bias_sum).epsilon(1e-10));
  }
}

TEST_CASE_TEMPLATE("OpenMP kernels are bit-identical to the serial reference", T, float, double) {
  for (const auto& s : kShapes) {
    const std::size_t nin = static_cast<std::size_t>(s.in_channels) * s.in_height * s.in_width;
    const std::size_t nout = static_cast<std::size_t>(s.out_channels) * s.out_height() * s.out_width();
    const auto in = random_vec<T>(nin, 7);
    const auto w = random_vec<T>(s.weight_count(), 8);
    const auto b = random_vec<T>(s.out_channels, 9);
    const auto gy = random_vec<T>(nout, 10);
    std::vector<T> o1(nout), o2(nout);
    serial::conv2d_forward(s, in.data(), w.data(), b.data(), o1.data());
    omp::conv2d_forward(s, in.data(), w.data(), b.data(), o2.data());
    CHECK(bit_equal(o1, o2));
    std::vector<T> gx1(nin), gx2(nin), gw1(w.size(), T(0)), gw2(w.size(), T(0)), gb1(b.size(), T(0)),
        gb2(b.size(), T(0));
    serial::conv2d_backward(s, in.data(), w.data(), gy.data(), gx1.data(), gw1.data(), gb1.data());
    omp::conv2d_backward(s, in.data(), w.data(), gy.data(), gx2.data(), gw2.data(), gb2.data());
    CHECK(bit_equal(gx1, gx2));
    CHECK(bit_equal(gw1, gw2));
    CHECK(bit_equal(gb1, gb2));
  }

  const int c = 3, h = 23, wd = 17;
  const auto img = random_vec<T>(static_cast<std::size_t>(c) * h * wd, 11);
  const std::vector<double> taps = {0.1, 0.2, 0.4, 0.2, 0.1};
  std::vector<T> s1(img.size()), s2(img.size());
  serial::smooth_separable(c, h, wd, taps, img.data(), s1.data());
  omp::smooth_separable(c, h, wd, taps, img.data(), s2.data());
  CHECK(bit_equal(s1, s2));
  serial::smooth_separable_adjoint(c, h, wd, taps, img.data(), s1.data());
  omp::smooth_separable_adjoint(c, h, wd, taps, img.data(), s2.data());
  CHECK(bit_equal(s1, s2));

  const double inverse[6] = {0.73, 0.12, 1.5, -0.1, 0.81, 2.25};
  const auto plan = make_warp_plan(h, wd, 12, 14, inverse);
  std::vector<T> w1(static_cast<std::size_t>(c) * 12 * 14), w2(w1.size());
  serial::warp_forward(plan, c, img.data(), w1.data());
  omp::warp_forward(plan, c, img.data(), w2.data());
  CHECK(bit_equal(w1, w2));
  std::vector<T> a1(img.size()), a2(img.size());
  serial::warp_adjoint(plan, c, w1.data(), a1.data());
  omp::warp_adjoint(plan, c, w1.data(), a2.data());
  CHECK(bit_equal(a1, a2));
}

TEST_CASE("row kernels agree across backends and with a direct loop") {
  const std::size_t dim = 13, rows = 57;
  const auto q = random_vec<float>(dim, 12);
  const auto m = random_vec<float>(dim * rows, 13);
  std::vector<double> d1(rows), d2(rows), p1(rows), p2(rows);
  serial::squared_l2_rows(q, m, dim, d1);
  omp::squared_l2_rows(q, m, dim, d2);
  serial::dot_rows(q, m, dim, p1);
  omp::dot_rows(q, m, dim, p2);
  CHECK(bit_equal(d1, d2));
  CHECK(bit_equal(p1, p2));
  for (std::size_t r = 0; r < rows; ++r) {
    double sq = 0, dot = 0;
    for (std::size_t k = 0; k < dim; ++k) {
      const double diff = static_cast<double>(q[k]) - m[r * dim + k];
      sq += diff * diff;
      dot += static_cast<double>(q[k]) * m[r * dim + k];
    }
    CHECK(d1[r] == doctest::Approx(sq).epsilon(1e-12));
    CHECK(p1[r] == doctest::Approx(dot).epsilon(1e-12));
  }
}

TEST_CASE("warp adjoint satisfies the dot-product identity") {
  const int c = 2, h = 15, w = 19;
  const double inverse[6] = {1.1, -0.2, -3.0, 0.25, 0.9, 4.0};
  const auto plan = make_warp_plan(h, w, 11, 13, inverse);
  const auto x = random_vec<double>(static_cast<std::size_t>(c) * h * w, 14);
  const auto gy = random_vec<double>(static_cast<std::size_t>(c) * 11 * 13, 15);
  std::vector<double> y(gy.size()), gx(x.size());
  serial::warp_forward(plan, c, x.data(), y.data());
  serial::warp_adjoint(plan, c, gy.data(), gx.data());
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < y.size(); ++i) lhs += y[i] * gy[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * gx[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("default backend switch") {
  const Backend before = default_backend();
  set_default_backend(Backend::Serial);
  CHECK(default_backend() == Backend::Serial);
  set_default_backend(Backend::OpenMP);
  CHECK(default_backend() == Backend::OpenMP);
  set_default_backend(before);
}
