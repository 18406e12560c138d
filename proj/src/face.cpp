#include "lowkey/face.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

#include "lowkey/error.hpp"

namespace lowkey::face {

AlignmentTransform::AlignmentTransform(const Matrix& affine) : affine_(affine) {
  if (std::abs(determinant()) < 1e-12) fail(ErrorCode::DegenerateLandmarks, "alignment transform is singular");
}

AlignmentTransform::Matrix AlignmentTransform::inverse() const {
  const double det = determinant();
  const double a = affine_[0], b = affine_[1], c = affine_[2];
  const double d = affine_[3], e = affine_[4], f = affine_[5];
  const double ia = e / det, ib = -b / det, id = -d / det, ie = a / det;
  return {ia, ib, -(ia * c + ib * f), id, ie, -(id * c + ie * f)};
}

Point AlignmentTransform::apply(Point p) const noexcept {
  return {affine_[0] * p.x + affine_[1] * p.y + affine_[2], affine_[3] * p.x + affine_[4] * p.y + affine_[5]};
}

void AlignmentTransform::set_affine(const Matrix& affine) {
  if (frozen_) fail(ErrorCode::ConfigError, "alignment transform is frozen");
  *this = AlignmentTransform(affine);
}

std::vector<FaceDetection> detect_faces(FaceDetector& detector, const imaging::ImageTensor& img) {
  std::vector<FaceDetection> raw = detector.detect(img);
  std::vector<FaceDetection> out;
  out.reserve(raw.size());
  for (FaceDetection d : raw) {
    d.box.x0 = std::clamp(d.box.x0, 0.0, static_cast<double>(img.width()));
    d.box.x1 = std::clamp(d.box.x1, 0.0, static_cast<double>(img.width()));
    d.box.y0 = std::clamp(d.box.y0, 0.0, static_cast<double>(img.height()));
    d.box.y1 = std::clamp(d.box.y1, 0.0, static_cast<double>(img.height()));
    d.confidence = std::clamp(d.confidence, 0.0, 1.0);
    if (!(d.box.x0 < d.box.x1 && d.box.y0 < d.box.y1)) continue;
    const double mx = 0.2 * d.box.width();
    const double my = 0.2 * d.box.height();
    const bool inside = std::all_of(d.landmarks.begin(), d.landmarks.end(), [&](const Point& p) {
      return p.x >= d.box.x0 - mx && p.x <= d.box.x1 + mx && p.y >= d.box.y0 - my && p.y <= d.box.y1 + my;
    });
    if (inside) out.push_back(d);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const FaceDetection& a, const FaceDetection& b) { return a.confidence > b.confidence; });
  return out;
}

AlignmentTransform fit_similarity(const Landmarks& source, const Landmarks& target) {
  constexpr int n = 5;
  double sx = 0, sy = 0, tx = 0, ty = 0;
  for (int i = 0; i < n; ++i) {
    sx += source[i].x;
    sy += source[i].y;
    tx += target[i].x;
    ty += target[i].y;
  }
  sx /= n;
  sy /= n;
  tx /= n;
  ty /= n;
  double sxx = 0, syy = 0, sxy = 0, num_a = 0, num_b = 0;
  for (int i = 0; i < n; ++i) {
    const double x = source[i].x - sx, y = source[i].y - sy;
    const double u = target[i].x - tx, v = target[i].y - ty;
    sxx += x * x;
    syy += y * y;
    sxy += x * y;
    num_a += x * u + y * v;
    num_b += x * v - y * u;
  }
  const double spread = sxx + syy;
  if (spread < 1e-9) fail(ErrorCode::DegenerateLandmarks, "landmarks coincide");
  // Smallest/largest eigenvalue of the 2x2 scatter matrix.
  const double half_trace = 0.5 * spread;
  const double disc = std::sqrt(std::max(0.0, 0.25 * (sxx - syy) * (sxx - syy) + sxy * sxy));
  const double lmax = half_trace + disc;
  const double lmin = half_trace - disc;
  if (lmin < 1e-4 * lmax) fail(ErrorCode::DegenerateLandmarks, "landmarks are collinear");
  const double a = num_a / spread;
  const double b = num_b / spread;
  AlignmentTransform t({a, -b, tx - a * sx + b * sy, b, a, ty - b * sx - a * sy});
  t.freeze();
  return t;
}

AlignmentTransform build_alignment(const FaceDetection& det) {
  return fit_similarity(det.landmarks, kCanonicalLandmarks);
}

FaceWarp::FaceWarp(const AlignmentTransform& t, int src_height, int src_width, int out_size) {
  const auto inv = t.inverse();
  const double m[6] = {inv[0], inv[1], inv[2], inv[3], inv[4], inv[5]};
  plan_ = kernels::make_warp_plan(src_height, src_width, out_size, out_size, m);
}

template <typename T>
Tensor<T> FaceWarp::forward(const Tensor<T>& img) const {
  if (img.height() != plan_.src_height || img.width() != plan_.src_width)
    fail(ErrorCode::ShapeMismatch, "warp source size mismatch");
  Tensor<T> out(img.channels(), plan_.out_height, plan_.out_width);
  kernels::warp_forward(plan_, img.channels(), img.data(), out.data());
  return out;
}

template <typename T>
Tensor<T> FaceWarp::adjoint(const Tensor<T>& grad_crop) const {
  if (grad_crop.height() != plan_.out_height || grad_crop.width() != plan_.out_width)
    fail(ErrorCode::ShapeMismatch, "warp gradient size mismatch");
  Tensor<T> out(grad_crop.channels(), plan_.src_height, plan_.src_width);
  kernels::warp_adjoint(plan_, grad_crop.channels(), grad_crop.data(), out.data());
  return out;
}

template Tensor<float> FaceWarp::forward(const Tensor<float>&) const;
template Tensor<double> FaceWarp::forward(const Tensor<double>&) const;
template Tensor<float> FaceWarp::adjoint(const Tensor<float>&) const;
template Tensor<double> FaceWarp::adjoint(const Tensor<double>&) const;

AlignedFace apply_alignment(const imaging::ImageTensor& img, const AlignmentTransform& t,
                            const FaceDetection& det) {
  if (!t.frozen()) fail(ErrorCode::ConfigError, "alignment transform must be frozen before use");
  FaceWarp warp(t, img.height(), img.width());
  return {imaging::clip_to_range(warp.forward(img.tensor())), t, det};
}

AlignedFace align_detection(const imaging::ImageTensor& img, const FaceDetection& det) {
  return apply_alignment(img, build_alignment(det), det);
}

// ---------------------------------------------------------------- detector

bool SkinBlobDetector::is_skin(float r, float g, float b) noexcept {
  const float luma = 0.299f * r + 0.587f * g + 0.114f * b;
  if (luma < 0.18f || r <= g || g <= b) return false;
  const float gr = g / r;
  const float bg = b / g;
  return gr >= 0.5f && gr <= 0.88f && bg >= 0.45f && bg <= 0.95f && r - b > 0.1f;
}

namespace {

// Blob centroid and per-axis standard deviations of an average face in
// the canonical frame.
constexpr double kFaceCenterX = 56.0;
constexpr double kFaceCenterY = 60.0;
constexpr double kFaceSigmaX = 20.0;
constexpr double kFaceSigmaY = 25.0;

}  // namespace

std::vector<FaceDetection> SkinBlobDetector::detect(const imaging::ImageTensor& input) {
  const imaging::ImageTensor img =
      options_.presmooth_sigma > 0
          ? imaging::gaussian_smooth(input, imaging::SmoothingKernel::full_support(options_.presmooth_sigma))
          : input;
  const int h = img.height();
  const int w = img.width();
  const std::size_t n = static_cast<std::size_t>(h) * w;
  std::vector<std::uint8_t> skin(n);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      skin[static_cast<std::size_t>(y) * w + x] = is_skin(img.at(0, y, x), img.at(1, y, x), img.at(2, y, x));

  // 3x3 majority vote suppresses isolated flips from noise.
  std::vector<std::uint8_t> mask(n, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int votes = 0;
      int total = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          ++total;
          votes += skin[static_cast<std::size_t>(yy) * w + xx];
        }
      mask[static_cast<std::size_t>(y) * w + x] = 2 * votes > total;
    }
  }

  // Non-skin reachable from the border is background; the rest is filled.
  std::vector<std::uint8_t> background(n, 0);
  std::deque<std::size_t> queue;
  auto seed = [&](int y, int x) {
    const std::size_t i = static_cast<std::size_t>(y) * w + x;
    if (!mask[i] && !background[i]) {
      background[i] = 1;
      queue.push_back(i);
    }
  };
  for (int x = 0; x < w; ++x) {
    seed(0, x);
    seed(h - 1, x);
  }
  for (int y = 0; y < h; ++y) {
    seed(y, 0);
    seed(y, w - 1);
  }
  while (!queue.empty()) {
    const std::size_t i = queue.front();
    queue.pop_front();
    const int y = static_cast<int>(i / w);
    const int x = static_cast<int>(i % w);
    if (y > 0) seed(y - 1, x);
    if (y + 1 < h) seed(y + 1, x);
    if (x > 0) seed(y, x - 1);
    if (x + 1 < w) seed(y, x + 1);
  }

  const int min_area = std::max(options_.min_area_pixels, static_cast<int>(options_.min_area_fraction * n));
  std::vector<int> label(n, -1);
  std::vector<FaceDetection> detections;
  int next_label = 0;
  for (std::size_t start = 0; start < n; ++start) {
    if (background[start] || label[start] >= 0) continue;
    std::vector<std::size_t> pixels;
    label[start] = next_label;
    queue.push_back(start);
    while (!queue.empty()) {
      const std::size_t i = queue.front();
      queue.pop_front();
      pixels.push_back(i);
      const int y = static_cast<int>(i / w);
      const int x = static_cast<int>(i % w);
      const std::size_t nb[4] = {y > 0 ? i - w : i, y + 1 < h ? i + w : i, x > 0 ? i - 1 : i, x + 1 < w ? i + 1 : i};
      for (std::size_t j : nb) {
        if (j == i || background[j] || label[j] >= 0) continue;
        label[j] = next_label;
        queue.push_back(j);
      }
    }
    ++next_label;
    if (static_cast<int>(pixels.size()) < min_area) continue;

    int x0 = w, y0 = h, x1 = -1, y1 = -1;
    for (std::size_t i : pixels) {
      const int y = static_cast<int>(i / w), x = static_cast<int>(i % w);
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
    Box box{static_cast<double>(x0), static_cast<double>(y0), x1 + 1.0, y1 + 1.0};
    const double fill = pixels.size() / (box.width() * box.height());
    const double aspect = box.height() / box.width();
    double confidence = std::clamp(1.0 - std::max(0.0, std::abs(fill - 0.8) - 0.08) / 0.2, 0.0, 1.0) *
                        std::clamp(1.0 - std::max(0.0, std::abs(aspect - 1.3) - 0.35) / 0.5, 0.0, 1.0);

    // Landmarks come from the blob's similarity frame (centroid, principal
    // axis, area). Eye and mouth holes would be sharper on clean photos but
    // move by pixels under small perturbations; the moments barely do.
    double mx = 0, my = 0;
    for (std::size_t i : pixels) {
      mx += static_cast<double>(i % w);
      my += static_cast<double>(i / w);
    }
    mx /= pixels.size();
    my /= pixels.size();
    double sxx = 0, syy = 0, sxy = 0;
    for (std::size_t i : pixels) {
      const double dx = static_cast<double>(i % w) - mx, dy = static_cast<double>(i / w) - my;
      sxx += dx * dx;
      syy += dy * dy;
      sxy += dx * dy;
    }
    sxx /= pixels.size();
    syy /= pixels.size();
    sxy /= pixels.size();
    const double tr = 0.5 * (sxx + syy), dt = std::sqrt(0.25 * (sxx - syy) * (sxx - syy) + sxy * sxy);
    const double major = tr + dt, minor = std::max(tr - dt, 1e-9);
    // Major axis direction, pointing down the face.
    double vx = sxy, vy = major - sxx;
    if (std::hypot(vx, vy) < 1e-12) {
      vx = 0;
      vy = 1;
    }
    if (vy < 0) {
      vx = -vx;
      vy = -vy;
    }
    const double vn = std::hypot(vx, vy);
    vx /= vn;
    vy /= vn;
    const double scale = std::sqrt(std::sqrt(major * minor) / (kFaceSigmaX * kFaceSigmaY));
    FaceDetection det;
    det.box = box;
    for (int k = 0; k < 5; ++k) {
      const double qx = kCanonicalLandmarks[k].x - kFaceCenterX, qy = kCanonicalLandmarks[k].y - kFaceCenterY;
      // Rotation taking the canonical down axis (0, 1) onto (vx, vy).
      det.landmarks[k] = {mx + scale * (vy * qx + vx * qy), my + scale * (-vx * qx + vy * qy)};
    }
    det.confidence = confidence;
    detections.push_back(det);
  }
  return detections;
}

}  // namespace lowkey::face
