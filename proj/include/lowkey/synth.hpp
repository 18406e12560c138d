#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "lowkey/face.hpp"
#include "lowkey/imaging.hpp"

// Procedural portrait generator used for desk-scale fixtures: each identity is
// a fixed set of facial traits; each image re-samples pose, expression,
// lighting, background and sensor noise.
namespace lowkey::synth {

struct Rgb {
  double r = 0, g = 0, b = 0;
};

struct IdentityTraits {
  Rgb skin, hair, iris, lips;
  double face_half_width = 40;   // canonical units
  double face_half_height = 50;
  double face_center_y = 60;
  double jaw = 0;                // >0 squarer lower face
  double eye_spacing = 0;        // added to the canonical half-distance
  double eye_height = 0;
  double eye_width = 6;
  double eye_open = 3.2;
  double brow_gap = 8;
  double brow_thickness = 2.5;
  double brow_slope = 0;
  double nose_length = 0;
  double nose_width = 5;
  double mouth_width = 29;
  double mouth_height = 0;
  double lip_thickness = 3;
  double hair_volume = 6;
  double hair_line = 0.0;        // fraction of the head covered on the sides
  double blush = 0.1;
  double cheek_shadow = 0.1;
  std::vector<std::array<double, 3>> spots;  // x, y, radius in canonical units
};

IdentityTraits sample_identity(std::uint64_t seed);

struct Placement {
  double scale = 0.9;   // canvas pixels per canonical unit
  double angle = 0;     // radians
  double center_x = 64; // canvas position of the canonical point (56, 60)
  double center_y = 66;
  // Expression.
  double smile = 0;
  double mouth_open = 0;
  double blink = 1;
};

struct SceneFace {
  IdentityTraits traits;
  Placement placement;
};

struct RenderedFace {
  face::Landmarks landmarks{};  // canvas coordinates
  face::Box box;                // face ellipse bounds, canvas coordinates
};

struct Scene {
  imaging::ImageTensor image;
  std::vector<RenderedFace> faces;
};

struct PortraitOptions {
  int height = 128;
  int width = 128;
  double min_scale = 0.84;
  double max_scale = 0.96;
  double max_angle_deg = 7;
  double max_shift = 5;
  double noise = 0.012;
};

Scene render_scene(const std::vector<SceneFace>& faces, int height, int width, std::uint64_t seed,
                   double noise = 0.012);
Scene render_portrait(const IdentityTraits& id, std::uint64_t image_seed, const PortraitOptions& opts = {});
// Plain background with no face.
imaging::ImageTensor render_background(int height, int width, std::uint64_t seed);

struct SyntheticImage {
  std::string image_id;
  std::string identity;  // empty for distractors
  imaging::ImageTensor image;
  face::Landmarks landmarks{};
};

struct SyntheticDataset {
  std::vector<std::string> identities;
  std::vector<SyntheticImage> images;
};

// `identities` x `images_per_identity` portraits plus `distractors` single
// images of unrelated people. Identity names are "<prefix><index>".
SyntheticDataset make_dataset(int identities, int images_per_identity, std::uint64_t seed, int distractors = 0,
                              const std::string& prefix = "id", const PortraitOptions& opts = {});

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) noexcept;

}  // namespace lowkey::synth
