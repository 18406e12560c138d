#include <doctest.h>

#include <cmath>
#include <random>

#include "../support/fixtures.hpp"
#include "lowkey/error.hpp"
#include "lowkey/face.hpp"
#include "lowkey/synth.hpp"

using namespace lowkey;
using face::AlignmentTransform;
using face::FaceDetection;
using face::kCanonicalLandmarks;
using testing_support::random_image;

namespace {

// Exhaustive template matcher: reports every local SSD minimum below a
// threshold as a face, with the template's landmarks shifted to the match.
class TemplateDetector : public face::FaceDetector {
 public:
  TemplateDetector(imaging::ImageTensor tmpl, face::Landmarks marks) : tmpl_(std::move(tmpl)), marks_(marks) {}

  std::vector<FaceDetection> detect(const imaging::ImageTensor& img) override {
    const int th = tmpl_.height(), tw = tmpl_.width();
    const int ny = img.height() - th + 1, nx = img.width() - tw + 1;
    std::vector<double> ssd(static_cast<std::size_t>(ny) * nx);
    // Coarse score on a 4-pixel lattice of the template.
    for (int oy = 0; oy < ny; ++oy)
      for (int ox = 0; ox < nx; ++ox) {
        double s = 0;
        for (int c = 0; c < 3; ++c)
          for (int y = 0; y < th; y += 4)
            for (int x = 0; x < tw; x += 4) {
              const double d = img.at(c, oy + y, ox + x) - tmpl_.at(c, y, x);
              s += d * d;
            }
        ssd[oy * nx + ox] = s / (3.0 * ((th + 3) / 4) * ((tw + 3) / 4));
      }
    std::vector<FaceDetection> out;
    for (int oy = 0; oy < ny; ++oy)
      for (int ox = 0; ox < nx; ++ox) {
        const double s = ssd[oy * nx + ox];
        if (s > 0.01) continue;
        bool minimum = true;
        for (int dy = -8; dy <= 8 && minimum; ++dy)
          for (int dx = -8; dx <= 8; ++dx) {
            const int y = oy + dy, x = ox + dx;
            if ((dy || dx) && y >= 0 && x >= 0 && y < ny && x < nx && ssd[y * nx + x] < s) {
              minimum = false;
              break;
            }
          }
        if (!minimum) continue;
        FaceDetection d;
        d.box = {double(ox), double(oy), double(ox + tw), double(oy + th)};
        for (int i = 0; i < 5; ++i) d.landmarks[i] = {marks_[i].x + ox, marks_[i].y + oy};
        d.confidence = 1.0 / (1.0 + 100 * s);
        out.push_back(d);
      }
    return out;
  }

 private:
  imaging::ImageTensor tmpl_;
  face::Landmarks marks_;
};

void paste(imaging::ImageTensor& canvas, const imaging::ImageTensor& img, int ox, int oy, float noise = 0,
           std::uint64_t seed = 0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0, noise > 0 ? noise : 1);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x)
        canvas.set(c, oy + y, ox + x, img.at(c, y, x) + (noise > 0 ? n(rng) : 0.0f));
}

struct Template {
  imaging::ImageTensor image;
  face::Landmarks marks;
};

Template face_template() {
  synth::PortraitOptions o;
  o.height = o.width = face::kCropSize;
  const auto scene = synth::render_portrait(synth::sample_identity(5), 17, o);
  return {scene.image, scene.faces.at(0).landmarks};
}

double dist(face::Point a, face::Point b) { return std::hypot(a.x - b.x, a.y - b.y); }

AlignmentTransform frozen(const AlignmentTransform::Matrix& m) {
  AlignmentTransform t(m);
  t.freeze();
  return t;
}

}  // namespace

TEST_CASE("stub detector finds a pasted face at its offset") {
  const auto t = face_template();
  imaging::ImageTensor canvas(240, 220, 0.5f);
  paste(canvas, t.image, 40, 60);
  TemplateDetector det(t.image, t.marks);
  const auto found = face::detect_faces(det, canvas);
  REQUIRE(found.size() == 1);
  CHECK(std::abs(found[0].box.x0 - 40) <= 3);
  CHECK(std::abs(found[0].box.y0 - 60) <= 3);
  CHECK(std::abs(found[0].box.x1 - 152) <= 3);
  CHECK(std::abs(found[0].box.y1 - 172) <= 3);
}

TEST_CASE("two pasted faces come back sorted by confidence") {
  const auto t = face_template();
  imaging::ImageTensor canvas(150, 300, 0.5f);
  paste(canvas, t.image, 10, 20, 0.05f, 3);  // noisier copy first in raster order
  paste(canvas, t.image, 170, 30);
  TemplateDetector det(t.image, t.marks);
  const auto found = face::detect_faces(det, canvas);
  REQUIRE(found.size() == 2);
  CHECK(found[0].confidence >= found[1].confidence);
  CHECK(std::abs(found[0].box.x0 - 170) <= 3);
  CHECK(std::abs(found[1].box.x0 - 10) <= 3);
}

TEST_CASE("detect_faces clamps boxes and drops invalid detections") {
  FaceDetection ok;
  ok.box = {-5, -5, 60, 70};
  ok.landmarks = kCanonicalLandmarks;
  for (auto& p : ok.landmarks) p = {p.x * 0.5, p.y * 0.5};
  ok.confidence = 0.7;
  FaceDetection flipped = ok;
  flipped.box = {50, 10, 20, 40};
  FaceDetection far_marks = ok;
  far_marks.landmarks[2] = {500, 500};
  far_marks.confidence = 0.99;
  testing_support::ScriptedDetector det({ok, flipped, far_marks});
  const auto found = face::detect_faces(det, imaging::ImageTensor(100, 100, 0.3f));
  REQUIRE(found.size() == 1);
  CHECK(found[0].box.x0 == 0);
  CHECK(found[0].box.y0 == 0);
  CHECK(found[0].box.x1 == 60);
}

TEST_CASE("skin blob detector") {
  face::SkinBlobDetector det;
  SUBCASE("blank and background-only images have no faces") {
    CHECK(face::detect_faces(det, imaging::ImageTensor(128, 128, 0.5f)).empty());
    for (std::uint64_t s = 1; s <= 5; ++s)
      CHECK(face::detect_faces(det, synth::render_background(128, 128, s)).empty());
  }
  SUBCASE("landmarks on rendered portraits") {
    double worst = 0, total = 0;
    int n = 0;
    for (std::uint64_t s = 1; s <= 30; ++s) {
      const auto scene = testing_support::portrait(s);
      const auto found = face::detect_faces(det, scene.image);
      REQUIRE(!found.empty());
      CHECK(found[0].confidence >= 0.9);
      for (int i = 0; i < 5; ++i) {
        const double e = dist(found[0].landmarks[i], scene.faces[0].landmarks[i]);
        worst = std::max(worst, e);
        total += e;
        ++n;
      }
    }
    CHECK(total / n < 3.5);
    CHECK(worst < 10.0);
  }
  SUBCASE("landmarks are stable under blotchy colour noise") {
    std::vector<double> shifts;
    for (std::uint64_t s = 1; s <= 20; ++s) {
      const auto scene = testing_support::portrait(s);
      std::mt19937_64 rng(s);
      std::uniform_real_distribution<float> u(-0.08f, 0.08f);
      Tensor<float> t = scene.image.tensor();
      for (int c = 0; c < 3; ++c)
        for (int y = 0; y < t.height(); y += 2)
          for (int x = 0; x < t.width(); x += 2) {
            const float d = u(rng);
            for (int yy = y; yy < std::min(y + 2, t.height()); ++yy)
              for (int xx = x; xx < std::min(x + 2, t.width()); ++xx) t.at(c, yy, xx) += d;
          }
      const auto noisy = imaging::clip_to_range(std::move(t));
      const auto a = face::detect_faces(det, scene.image);
      const auto b = face::detect_faces(det, noisy);
      REQUIRE(!a.empty());
      REQUIRE(!b.empty());
      double m = 0;
      for (int i = 0; i < 5; ++i) m = std::max(m, dist(a[0].landmarks[i], b[0].landmarks[i]));
      shifts.push_back(m);
    }
    std::sort(shifts.begin(), shifts.end());
    CHECK(shifts[shifts.size() / 2] < 1.5);
    CHECK(shifts.back() < 5.0);
  }
}

TEST_CASE("alignment fit examples") {
  const auto id = face::fit_similarity(kCanonicalLandmarks, kCanonicalLandmarks);
  const AlignmentTransform::Matrix eye = {1, 0, 0, 0, 1, 0};
  for (int i = 0; i < 6; ++i) CHECK(std::abs(id.affine()[i] - eye[i]) < 1e-6);

  FaceDetection d;
  d.box = {0, 0, 250, 250};
  for (int i = 0; i < 5; ++i) d.landmarks[i] = {kCanonicalLandmarks[i].x * 2 + 10, kCanonicalLandmarks[i].y * 2 + 10};
  d.confidence = 1;
  const auto t = face::build_alignment(d);
  CHECK(t.frozen());
  const AlignmentTransform::Matrix want = {0.5, 0, -5, 0, 0.5, -5};
  for (int i = 0; i < 6; ++i) CHECK(std::abs(t.affine()[i] - want[i]) < 1e-5);

  // Closed-form oracle for a rotated template: the fit must invert it.
  const double a = 0.3, s = 1.4;
  face::Landmarks rot;
  for (int i = 0; i < 5; ++i) {
    const auto p = kCanonicalLandmarks[i];
    rot[i] = {s * (std::cos(a) * p.x - std::sin(a) * p.y) + 20, s * (std::sin(a) * p.x + std::cos(a) * p.y) - 7};
  }
  const auto back = face::fit_similarity(rot, kCanonicalLandmarks);
  for (int i = 0; i < 5; ++i) CHECK(dist(back.apply(rot[i]), kCanonicalLandmarks[i]) < 1e-6);
}

TEST_CASE("degenerate landmarks") {
  FaceDetection d;
  d.box = {0, 0, 100, 100};
  d.landmarks.fill({30, 40});
  try {
    face::build_alignment(d);
    FAIL("expected DegenerateLandmarks");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DegenerateLandmarks);
  }
  for (int i = 0; i < 5; ++i) d.landmarks[i] = {10.0 + 5 * i, 20.0 + 5 * i};
  CHECK_THROWS_AS(face::build_alignment(d), Error);
}

TEST_CASE("transform freezing") {
  AlignmentTransform t;
  CHECK(!t.frozen());
  const auto img = random_image(112, 112, 1);
  CHECK_THROWS_AS(face::apply_alignment(img, t), Error);
  t.set_affine({1, 0, 1, 0, 1, 1});
  t.freeze();
  try {
    t.set_affine({1, 0, 0, 0, 1, 0});
    FAIL("expected ConfigError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ConfigError);
  }
}

TEST_CASE("identity alignment reproduces a 112x112 input") {
  const auto img = random_image(112, 112, 2);
  const auto once = face::apply_alignment(img, frozen({1, 0, 0, 0, 1, 0}));
  double worst = 0;
  for (std::size_t i = 0; i < img.values().size(); ++i)
    worst = std::max(worst, double(std::abs(once.crop.values()[i] - img.values()[i])));
  CHECK(worst < 1e-6);
  const auto twice = face::apply_alignment(once.crop, frozen({1, 0, 0, 0, 1, 0}));
  CHECK(twice.crop == once.crop);
}

TEST_CASE("integer translation crops the shifted input exactly") {
  const auto img = random_image(140, 150, 3);
  const int dx = 10, dy = 7;
  const auto out = face::apply_alignment(img, frozen({1, 0, -double(dx), 0, 1, -double(dy)}));
  REQUIRE(out.crop.height() == 112);
  bool exact = true;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 112; ++y)
      for (int x = 0; x < 112; ++x) exact = exact && out.crop.at(c, y, x) == img.at(c, y + dy, x + dx);
  CHECK(exact);
}

TEST_CASE("warp gradient matches finite differences") {
  const auto scene = testing_support::portrait(9);
  face::SkinBlobDetector det;
  const auto found = face::detect_faces(det, scene.image);
  REQUIRE(!found.empty());
  const auto t = face::build_alignment(found[0]);
  const face::FaceWarp warp(t, scene.image.height(), scene.image.width());
  Tensor<double> x = scene.image.tensor().cast<double>();

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1, 1);
  Tensor<double> r(3, face::kCropSize, face::kCropSize);
  for (double& v : r.values()) v = u(rng);
  auto loss_sum = [&](const Tensor<double>& in) {
    double s = 0;
    const auto y = warp.forward(in);
    for (double v : y.values()) s += v;
    return s;
  };
  auto loss_dot = [&](const Tensor<double>& in) {
    const auto y = warp.forward(in);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
    return s;
  };
  const auto g_sum = warp.adjoint(Tensor<double>(3, face::kCropSize, face::kCropSize, 1.0));
  const auto g_dot = warp.adjoint(r);

  // Sample coordinates where the crop actually reads the source.
  std::vector<std::size_t> support;
  for (std::size_t i = 0; i < g_sum.size(); ++i)
    if (g_sum[i] > 1e-3) support.push_back(i);
  REQUIRE(support.size() > 100);
  const double h = 1e-4;
  for (int k = 0; k < 20; ++k) {
    const std::size_t i = support[std::uniform_int_distribution<std::size_t>(0, support.size() - 1)(rng)];
    Tensor<double> xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    CHECK(testing_support::rel_err((loss_sum(xp) - loss_sum(xm)) / (2 * h), g_sum[i]) < 1e-3);
    CHECK(testing_support::rel_err((loss_dot(xp) - loss_dot(xm)) / (2 * h), g_dot[i]) < 1e-3);
  }
}
