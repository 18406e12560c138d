#include "lowkey/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "lowkey/error.hpp"

namespace lowkey::synth {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept {
  // splitmix64 over the combined words.
  std::uint64_t z = a * 0x9e3779b97f4a7c15ULL + b + 0x632be59bd9b4e019ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

namespace {

class Sampler {
 public:
  explicit Sampler(std::uint64_t seed) : rng_(seed) {}
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  int index(int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng_); }
  bool chance(double p) { return uniform(0, 1) < p; }
  double normal() { return std::normal_distribution<double>(0, 1)(rng_); }

 private:
  std::mt19937_64 rng_;
};

Rgb scale(const Rgb& c, double s) { return {c.r * s, c.g * s, c.b * s}; }
Rgb mix(const Rgb& a, const Rgb& b, double t) {
  return {a.r + (b.r - a.r) * t, a.g + (b.g - a.g) * t, a.b + (b.b - a.b) * t};
}

// Backgrounds and clothing stay out of the skin chroma band: blue, green,
// neutral gray or purple families only.
Rgb cool_color(Sampler& s) {
  switch (s.index(4)) {
    case 0: {
      const double b = s.uniform(0.5, 0.9);
      return {s.uniform(0.1, 0.45), s.uniform(0.25, b - 0.05), b};
    }
    case 1: {
      const double g = s.uniform(0.4, 0.8);
      return {s.uniform(0.1, g - 0.1), g, s.uniform(0.2, 0.55)};
    }
    case 2: {
      const double v = s.uniform(0.2, 0.85);
      return {v, v + s.uniform(0.0, 0.02), v + s.uniform(0.0, 0.04)};
    }
    default: {
      const double b = s.uniform(0.45, 0.8);
      return {s.uniform(0.3, 0.6), s.uniform(0.15, 0.35), b};
    }
  }
}

double coverage(double signed_distance_px) { return std::clamp(0.5 - signed_distance_px, 0.0, 1.0); }

struct FaceFrame {
  const SceneFace* face;
  double cos_a, sin_a;
  // Canonical landmark anchors for this identity and expression.
  double left_eye_x, right_eye_x, eye_y, nose_y, mouth_y, mouth_half;

  face::Point to_canvas(double qx, double qy) const {
    const Placement& p = face->placement;
    const double dx = (qx - 56.0) * p.scale;
    const double dy = (qy - 60.0) * p.scale;
    return {p.center_x + cos_a * dx - sin_a * dy, p.center_y + sin_a * dx + cos_a * dy};
  }
  face::Point to_canonical(double x, double y) const {
    const Placement& p = face->placement;
    const double dx = x - p.center_x;
    const double dy = y - p.center_y;
    return {56.0 + (cos_a * dx + sin_a * dy) / p.scale, 60.0 + (-sin_a * dx + cos_a * dy) / p.scale};
  }
};

FaceFrame make_frame(const SceneFace& f) {
  const IdentityTraits& t = f.traits;
  FaceFrame fr{&f, std::cos(f.placement.angle), std::sin(f.placement.angle), 0, 0, 0, 0, 0, 0};
  const double half = 0.5 * (73.5318 - 38.2946) + t.eye_spacing;
  fr.left_eye_x = 55.9132 - half;
  fr.right_eye_x = 55.9132 + half;
  fr.eye_y = 51.6 + t.eye_height;
  fr.nose_y = 71.7366 + t.nose_length;
  fr.mouth_y = 92.28 + t.mouth_height;
  fr.mouth_half = 0.5 * t.mouth_width;
  return fr;
}

double superellipse_radius(double dx, double dy, double hw, double hh, double p) {
  return std::pow(std::pow(std::abs(dx / hw), p) + std::pow(std::abs(dy / hh), p), 1.0 / p);
}

// Returns (color, alpha) of the face layer stack at canonical point q.
std::pair<Rgb, double> shade_face(const FaceFrame& fr, double qx, double qy) {
  const IdentityTraits& t = fr.face->traits;
  const Placement& pl = fr.face->placement;
  const double px_per_unit = pl.scale;
  const double cy = t.face_center_y;
  const double dx = qx - 56.0;
  const double dy = qy - cy;
  const double power = 2.0 + (dy > 0 ? t.jaw : 0.0);
  const double r = superellipse_radius(dx, dy, t.face_half_width, t.face_half_height, power);
  const double face_alpha = coverage((r - 1.0) * std::min(t.face_half_width, t.face_half_height) * px_per_unit);

  // Hair sits behind the face and frames the top and sides.
  const double hr = superellipse_radius(dx, qy - (cy - 4.0), t.face_half_width + t.hair_volume,
                                        t.face_half_height + t.hair_volume * 0.8, 2.0);
  double hair_alpha = coverage((hr - 1.0) * (t.face_half_width + t.hair_volume) * px_per_unit);
  const double hair_bottom = cy + t.hair_line * t.face_half_height;
  hair_alpha *= coverage((qy - hair_bottom) * px_per_unit);

  if (face_alpha <= 0) return {t.hair, hair_alpha};

  Rgb c = t.skin;
  // Contour shading towards the face edge and under the cheekbones.
  c = scale(c, 1.0 - t.cheek_shadow * std::pow(std::clamp(r, 0.0, 1.0), 4.0));
  // Blush.
  for (double side : {-1.0, 1.0}) {
    const double bx = qx - (56.0 + side * 21.0);
    const double by = qy - 80.0;
    const double w = std::exp(-(bx * bx + by * by) / (2 * 7.0 * 7.0)) * t.blush;
    c.r *= 1.0 + w;
    c.g *= 1.0 - 0.4 * w;
  }
  // Spots.
  for (const auto& s : t.spots) {
    const double d = std::hypot(qx - s[0], qy - s[1]) - s[2];
    c = mix(c, scale(t.skin, 0.82), coverage(d * px_per_unit));
  }
  // Nose: side shadow and nostrils.
  {
    const double nx = qx - 56.0;
    const double ny = qy - fr.nose_y;
    if (ny > -18 && ny < 2) {
      const double w = std::exp(-std::pow((nx - 0.5 * t.nose_width) / 1.6, 2)) * 0.12;
      c = scale(c, 1.0 - w);
    }
    for (double side : {-1.0, 1.0}) {
      const double d = std::hypot((qx - (56.0 + side * t.nose_width * 0.55)) / 1.6, (qy - (fr.nose_y + 1.5)) / 1.0) - 1.0;
      c = mix(c, scale(t.skin, 0.72), coverage(d * 1.2 * px_per_unit));
    }
  }
  // Brows keep the skin chroma so the face blob stays solid above the eyes.
  for (double side : {-1.0, 1.0}) {
    const double ex = side < 0 ? fr.left_eye_x : fr.right_eye_x;
    const double u = (qx - ex) / (1.7 * t.eye_width);
    if (std::abs(u) < 1.0) {
      const double center = fr.eye_y - t.brow_gap - 2.0 * (1 - u * u) + side * t.brow_slope * u * 2.0;
      const double d = std::abs(qy - center) - 0.5 * t.brow_thickness * (1.0 - 0.4 * std::abs(u));
      c = mix(c, scale(t.skin, 0.66), coverage(d * px_per_unit) * (1.0 - std::pow(std::abs(u), 6)));
    }
  }
  // Eyes.
  for (double side : {-1.0, 1.0}) {
    const double ex = side < 0 ? fr.left_eye_x : fr.right_eye_x;
    const double eh = std::max(1.8, t.eye_open * pl.blink);
    const double ux = (qx - ex) / t.eye_width;
    const double uy = (qy - fr.eye_y) / eh;
    const double er = std::hypot(ux, uy);
    const double a = coverage((er - 1.0) * std::min(t.eye_width, eh) * px_per_unit);
    if (a > 0) {
      Rgb eye{0.93, 0.92, 0.9};
      const double iris_r = std::min(0.55 * t.eye_width, 2.8);
      const double d_iris = std::hypot(qx - ex, qy - fr.eye_y) - iris_r;
      eye = mix(eye, t.iris, coverage(d_iris * px_per_unit));
      const double d_pupil = std::hypot(qx - ex, qy - fr.eye_y) - 0.4 * iris_r;
      eye = mix(eye, Rgb{0.05, 0.04, 0.04}, coverage(d_pupil * px_per_unit));
      // Upper lid.
      if (uy < 0) eye = mix(eye, scale(t.hair, 0.5), std::clamp((er - 0.75) * 4.0, 0.0, 1.0));
      c = mix(c, eye, a);
    }
  }
  // Mouth.
  {
    const double u = (qx - 56.0) / fr.mouth_half;
    if (std::abs(u) < 1.05) {
      const double taper = std::sqrt(std::max(0.0, 1.0 - u * u));
      const double center = fr.mouth_y - pl.smile * u * u;
      const double half = 0.5 * t.lip_thickness * taper + 0.45 * pl.mouth_open * taper + 0.5;
      const double d = std::abs(qy - center) - half;
      const double edge = (std::abs(u) - 1.0) * fr.mouth_half;
      const double a = coverage(std::max(d, edge) * px_per_unit);
      if (a > 0) {
        Rgb lip = t.lips;
        const double inner = std::abs(qy - center) - 0.45 * pl.mouth_open * taper;
        lip = mix(lip, Rgb{0.22, 0.07, 0.07}, coverage(inner * px_per_unit) * (pl.mouth_open > 0.2 ? 1.0 : 0.0));
        c = mix(c, lip, a);
      }
    }
  }
  const Rgb out = mix(t.hair, c, face_alpha);
  return {out, std::max(face_alpha, hair_alpha)};
}

}  // namespace

IdentityTraits sample_identity(std::uint64_t seed) {
  Sampler s(mix_seed(seed, 0x1d));
  IdentityTraits t;
  const double r = s.uniform(0.6, 0.8);
  const double g = r * s.uniform(0.64, 0.8);
  t.skin = {r, g, g * s.uniform(0.64, 0.84)};
  static const Rgb kHair[] = {{0.07, 0.06, 0.06}, {0.18, 0.1, 0.06}, {0.45, 0.18, 0.1},
                              {0.8, 0.75, 0.5},   {0.55, 0.55, 0.57}, {0.3, 0.22, 0.2}};
  t.hair = kHair[s.index(6)];
  t.hair = scale(t.hair, s.uniform(0.85, 1.1));
  if (t.hair.g / std::max(t.hair.r, 1e-6) < 0.9 && t.hair.r > 0.25) t.hair.g = t.hair.r * 0.4;
  static const Rgb kIris[] = {{0.32, 0.18, 0.1}, {0.25, 0.42, 0.65}, {0.25, 0.45, 0.28}, {0.42, 0.44, 0.47}, {0.12, 0.08, 0.06}};
  t.iris = kIris[s.index(5)];
  t.lips = {s.uniform(0.55, 0.75), s.uniform(0.16, 0.26), s.uniform(0.2, 0.3)};
  t.face_half_width = s.uniform(36, 42);
  t.face_half_height = s.uniform(46, 52);
  t.face_center_y = s.uniform(58, 62);
  t.jaw = s.uniform(0.0, 0.7);
  t.eye_spacing = s.uniform(-3.0, 3.0);
  t.eye_height = s.uniform(-2.5, 2.5);
  t.eye_width = s.uniform(5.0, 7.5);
  t.eye_open = s.uniform(2.6, 3.8);
  t.brow_gap = s.uniform(6.5, 10.0);
  t.brow_thickness = s.uniform(1.6, 3.6);
  t.brow_slope = s.uniform(-1.0, 1.0);
  t.nose_length = s.uniform(-3.0, 3.0);
  t.nose_width = s.uniform(4.0, 7.0);
  t.mouth_width = s.uniform(22.0, 34.0);
  t.mouth_height = s.uniform(-3.0, 3.0);
  t.lip_thickness = s.uniform(2.5, 5.0);
  t.hair_volume = s.uniform(3.0, 12.0);
  t.hair_line = s.uniform(-0.6, 0.4);
  t.blush = s.uniform(0.0, 0.14);
  t.cheek_shadow = s.uniform(0.05, 0.25);
  const int spots = s.index(6);
  for (int i = 0; i < spots; ++i) {
    const double a = s.uniform(0, 2 * M_PI);
    const double rad = s.uniform(0.3, 0.85);
    t.spots.push_back({56 + std::cos(a) * rad * t.face_half_width, t.face_center_y + std::sin(a) * rad * t.face_half_height,
                       s.uniform(0.8, 2.2)});
  }
  return t;
}

imaging::ImageTensor render_background(int height, int width, std::uint64_t seed) {
  return render_scene({}, height, width, seed, 0.0).image;
}

Scene render_scene(const std::vector<SceneFace>& faces, int height, int width, std::uint64_t seed, double noise) {
  if (height < 1 || width < 1) fail(ErrorCode::ShapeMismatch, "scene size must be positive");
  Sampler s(mix_seed(seed, 0xb9));
  const Rgb bg_a = cool_color(s);
  const Rgb bg_b = cool_color(s);
  const double angle = s.uniform(0, M_PI);
  struct Blob {
    double x, y, r;
    Rgb c;
  };
  std::vector<Blob> blobs;
  const int nblobs = s.index(5);
  for (int i = 0; i < nblobs; ++i)
    blobs.push_back({s.uniform(0, width), s.uniform(0, height), s.uniform(6, 30), cool_color(s)});
  const Rgb shirt = cool_color(s);

  const double gain = s.uniform(0.88, 1.08);
  const double grad_x = s.uniform(-0.07, 0.07);
  const double grad_y = s.uniform(-0.07, 0.07);
  const Rgb tint{s.uniform(0.98, 1.02), s.uniform(0.98, 1.02), s.uniform(0.98, 1.02)};

  std::vector<FaceFrame> frames;
  Scene scene;
  for (const auto& f : faces) {
    frames.push_back(make_frame(f));
    const FaceFrame& fr = frames.back();
    RenderedFace rf;
    const face::Point pts[5] = {fr.to_canvas(fr.left_eye_x, fr.eye_y), fr.to_canvas(fr.right_eye_x, fr.eye_y),
                                fr.to_canvas(56.0, fr.nose_y),
                                fr.to_canvas(56.0 - fr.mouth_half, fr.mouth_y - f.placement.smile),
                                fr.to_canvas(56.0 + fr.mouth_half, fr.mouth_y - f.placement.smile)};
    for (int i = 0; i < 5; ++i) rf.landmarks[i] = pts[i];
    double x0 = 1e9, y0 = 1e9, x1 = -1e9, y1 = -1e9;
    for (int k = 0; k < 64; ++k) {
      const double a = 2 * M_PI * k / 64;
      const face::Point p = fr.to_canvas(56 + std::cos(a) * f.traits.face_half_width,
                                         f.traits.face_center_y + std::sin(a) * f.traits.face_half_height);
      x0 = std::min(x0, p.x);
      x1 = std::max(x1, p.x);
      y0 = std::min(y0, p.y);
      y1 = std::max(y1, p.y);
    }
    rf.box = {x0, y0, x1, y1};
    scene.faces.push_back(rf);
  }

  Tensor<float> px(3, height, width);
  const double ca = std::cos(angle), sa = std::sin(angle);
  Sampler noise_rng(mix_seed(seed, 0x77));
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double t = std::clamp(0.5 + ((x - 0.5 * width) * ca + (y - 0.5 * height) * sa) / (width + height), 0.0, 1.0);
      Rgb c = mix(bg_a, bg_b, t);
      for (const auto& b : blobs) c = mix(c, b.c, 0.6 * coverage(std::hypot(x - b.x, y - b.y) - b.r));
      for (const auto& fr : frames) {
        const face::Point q = fr.to_canonical(x, y);
        // Shoulders below the chin.
        const double sd = superellipse_radius(q.x - 56.0, q.y - 150.0, 62.0, 34.0, 2.0);
        c = mix(c, shirt, coverage((sd - 1.0) * 30.0 * fr.face->placement.scale));
        const auto [fc, alpha] = shade_face(fr, q.x, q.y);
        if (alpha > 0) c = mix(c, fc, alpha);
      }
      const double light = gain * (1.0 + grad_x * (x - 0.5 * width) / width * 2 + grad_y * (y - 0.5 * height) / height * 2);
      const double vals[3] = {c.r * light * tint.r, c.g * light * tint.g, c.b * light * tint.b};
      for (int ch = 0; ch < 3; ++ch) px.at(ch, y, x) = static_cast<float>(vals[ch] + noise * noise_rng.normal());
    }
  }
  scene.image = imaging::clip_to_range(std::move(px));
  return scene;
}

Scene render_portrait(const IdentityTraits& id, std::uint64_t image_seed, const PortraitOptions& opts) {
  Sampler s(mix_seed(image_seed, 0x51));
  SceneFace f{id, {}};
  f.placement.scale = s.uniform(opts.min_scale, opts.max_scale) * std::min(opts.height, opts.width) / 128.0;
  f.placement.angle = s.uniform(-opts.max_angle_deg, opts.max_angle_deg) * M_PI / 180.0;
  f.placement.center_x = 0.5 * opts.width + s.uniform(-opts.max_shift, opts.max_shift);
  f.placement.center_y = 0.5 * opts.height + 2.0 + s.uniform(-opts.max_shift, opts.max_shift);
  f.placement.smile = s.uniform(-1.0, 3.0);
  f.placement.mouth_open = s.chance(0.3) ? s.uniform(0.5, 3.0) : 0.0;
  f.placement.blink = s.chance(0.15) ? s.uniform(0.55, 0.8) : s.uniform(0.9, 1.1);
  f.traits.hair = scale(f.traits.hair, s.uniform(0.95, 1.05));
  return render_scene({f}, opts.height, opts.width, mix_seed(image_seed, 0xa3), opts.noise);
}

SyntheticDataset make_dataset(int identities, int images_per_identity, std::uint64_t seed, int distractors,
                              const std::string& prefix, const PortraitOptions& opts) {
  SyntheticDataset ds;
  for (int i = 0; i < identities; ++i) {
    const std::string name = prefix + std::to_string(i);
    ds.identities.push_back(name);
    const IdentityTraits traits = sample_identity(mix_seed(seed, static_cast<std::uint64_t>(i)));
    for (int j = 0; j < images_per_identity; ++j) {
      Scene sc = render_portrait(traits, mix_seed(mix_seed(seed, i), 1000 + j), opts);
      char buf[32];
      std::snprintf(buf, sizeof(buf), "_%03d", j);
      ds.images.push_back({name + buf, name, std::move(sc.image), sc.faces.front().landmarks});
    }
  }
  for (int k = 0; k < distractors; ++k) {
    const IdentityTraits traits = sample_identity(mix_seed(seed ^ 0xd15ULL, 100000 + k));
    Scene sc = render_portrait(traits, mix_seed(seed ^ 0xd15ULL, 200000 + k), opts);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "distractor_%04d", k);
    ds.images.push_back({buf, "", std::move(sc.image), sc.faces.front().landmarks});
  }
  return ds;
}

}  // namespace lowkey::synth
