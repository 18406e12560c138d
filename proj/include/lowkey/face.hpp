#pragma once

#include <array>
#include <memory>
#include <vector>

#include "lowkey/imaging.hpp"
#include "lowkey/kernels.hpp"

namespace lowkey::face {

inline constexpr int kCropSize = 112;

struct Point {
  double x = 0;
  double y = 0;
};

// Left eye, right eye, nose tip, left mouth corner, right mouth corner.
using Landmarks = std::array<Point, 5>;

// Canonical 5-point positions in the 112x112 aligned frame.
inline constexpr Landmarks kCanonicalLandmarks = {{
    {38.2946, 51.6963},
    {73.5318, 51.5014},
    {56.0252, 71.7366},
    {41.5493, 92.3655},
    {70.7299, 92.2041},
}};

struct Box {
  double x0 = 0;
  double y0 = 0;
  double x1 = 0;
  double y1 = 0;

  double width() const noexcept { return x1 - x0; }
  double height() const noexcept { return y1 - y0; }
};

struct FaceDetection {
  Box box;
  Landmarks landmarks{};
  double confidence = 0;
};

// Source-image coordinates -> canonical crop coordinates, row-major 2x3.
class AlignmentTransform {
 public:
  using Matrix = std::array<double, 6>;

  AlignmentTransform() : AlignmentTransform(identity_matrix()) {}
  explicit AlignmentTransform(const Matrix& affine);

  static AlignmentTransform identity() { return AlignmentTransform(identity_matrix()); }

  const Matrix& affine() const noexcept { return affine_; }
  Matrix inverse() const;
  Point apply(Point p) const noexcept;
  double determinant() const noexcept { return affine_[0] * affine_[4] - affine_[1] * affine_[3]; }

  bool frozen() const noexcept { return frozen_; }
  void freeze() noexcept { frozen_ = true; }
  // Throws ConfigError once frozen.
  void set_affine(const Matrix& affine);

 private:
  static Matrix identity_matrix() { return {1, 0, 0, 0, 1, 0}; }

  Matrix affine_;
  bool frozen_ = false;
};

struct AlignedFace {
  imaging::ImageTensor crop;
  AlignmentTransform transform;
  FaceDetection source_detection;
};

// Plug-in contract: image in, (box, 5 landmarks, confidence) out.
class FaceDetector {
 public:
  virtual ~FaceDetector() = default;
  virtual std::vector<FaceDetection> detect(const imaging::ImageTensor& img) = 0;
};

// Runs `detector`, clamps boxes to the image, drops detections that break the
// box/landmark invariants and sorts by descending confidence.
std::vector<FaceDetection> detect_faces(FaceDetector& detector, const imaging::ImageTensor& img);

// Least-squares similarity from the detection's landmarks onto the canonical
// template. The result is frozen. Throws DegenerateLandmarks.
AlignmentTransform build_alignment(const FaceDetection& det);
AlignmentTransform fit_similarity(const Landmarks& source, const Landmarks& target);

// Bilinear crop through a frozen transform. The warp is linear in the pixels,
// so `FaceWarp` also exposes its adjoint for gradient propagation.
class FaceWarp {
 public:
  FaceWarp(const AlignmentTransform& t, int src_height, int src_width, int out_size = kCropSize);

  template <typename T>
  Tensor<T> forward(const Tensor<T>& img) const;
  template <typename T>
  Tensor<T> adjoint(const Tensor<T>& grad_crop) const;

  int src_height() const noexcept { return plan_.src_height; }
  int src_width() const noexcept { return plan_.src_width; }

 private:
  kernels::WarpPlan plan_;
};

// Throws ConfigError when `t` is not frozen.
AlignedFace apply_alignment(const imaging::ImageTensor& img, const AlignmentTransform& t,
                            const FaceDetection& det = {});

AlignedFace align_detection(const imaging::ImageTensor& img, const FaceDetection& det);

// Skin-chroma blob detector with hole-based eye and mouth localisation.
// Designed for frontal, evenly lit portraits on non-skin backgrounds.
class SkinBlobDetector : public FaceDetector {
 public:
  struct Options {
    double min_area_fraction = 0.01;
    int min_area_pixels = 150;
    // Pre-blur for the skin test; keeps pixel-level noise (including
    // adversarial perturbations) from fragmenting the skin mask.
    double presmooth_sigma = 2.0;
  };

  SkinBlobDetector() = default;
  explicit SkinBlobDetector(Options options) : options_(options) {}

  std::vector<FaceDetection> detect(const imaging::ImageTensor& img) override;

  static bool is_skin(float r, float g, float b) noexcept;

 private:
  Options options_;
};

}  // namespace lowkey::face
