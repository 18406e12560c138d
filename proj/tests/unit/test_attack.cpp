#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include <json.hpp>

#include "../support/fixtures.hpp"
#include "lowkey/attack.hpp"
#include "lowkey/error.hpp"
#include "lowkey/perceptual.hpp"

using namespace lowkey;
using namespace lowkey::attack;
using testing_support::rel_err;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return ErrorCode::IoError;
}

struct Fixture {
  synth::Scene scene = testing_support::portrait(21);
  Models ensemble = testing_support::tiny_ensemble(2);
  std::vector<face::FaceDetection> dets;
  std::vector<face::AlignmentTransform> transforms;

  Fixture() {
    face::SkinBlobDetector det;
    dets = face::detect_faces(det, scene.image);
    REQUIRE(!dets.empty());
    transforms.push_back(face::build_alignment(dets[0]));
  }
};

imaging::ImageTensor perturbed(const imaging::ImageTensor& x, double eps, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1, 1);
  Tensor<float> t = x.tensor();
  for (float& v : t.values()) v += static_cast<float>(eps) * u(rng);
  return imaging::clip_to_range(std::move(t));
}

AttackConfig quick(int steps) {
  auto c = AttackConfig::from_preset(Preset::Standard);
  c.steps = steps;
  c.step_size = 0.01;
  return c;
}

// Independent term-by-term recomputation from the public building blocks.
double oracle_objective(const imaging::ImageTensor& x, const imaging::ImageTensor& xp, const Models& ens,
                        const std::vector<face::AlignmentTransform>& ts, const AttackConfig& cfg) {
  const auto gx = imaging::gaussian_smooth(xp, cfg.smoothing);
  double feature = 0;
  for (const auto& t : ts) {
    double per_face = 0;
    for (const auto& m : ens) {
      const auto f = m->extract(face::apply_alignment(x, t)).values;
      const auto fp = m->extract(face::apply_alignment(xp, t)).values;
      const auto fg = m->extract(face::apply_alignment(gx, t)).values;
      const double a = extractors::l2_distance(f, fp), b = extractors::l2_distance(f, fg);
      per_face += (a * a + b * b) / extractors::l2_norm(f);
    }
    feature += per_face / (2.0 * ens.size());
  }
  return feature / ts.size() - cfg.alpha * perceptual::lpips(x, xp);
}

}  // namespace

TEST_CASE("presets and config validation") {
  const auto std_cfg = AttackConfig::from_preset(Preset::Standard);
  CHECK(std_cfg.alpha == 0.05);
  CHECK(std_cfg.steps == 50);
  CHECK(std_cfg.step_size == 0.0025);
  CHECK(std_cfg.smoothing.sigma() == 3.0);
  CHECK(std_cfg.smoothing.window() == 7);
  CHECK(AttackConfig::from_preset(Preset::Small).alpha == 0.08);
  CHECK(AttackConfig::from_preset(Preset::Small).steps < std_cfg.steps);
  CHECK(AttackConfig::from_preset(Preset::Large).steps > std_cfg.steps);
  for (auto p : {Preset::Small, Preset::Standard, Preset::Large, Preset::Custom})
    CHECK(preset_from_string(to_string(p)) == p);
  CHECK(code_of([] { preset_from_string("huge"); }) == ErrorCode::ConfigError);

  auto bad = std_cfg;
  bad.alpha = -1;
  CHECK(code_of([&] { bad.validate(); }) == ErrorCode::ConfigError);
  bad = std_cfg;
  bad.steps = -2;
  CHECK(code_of([&] { bad.validate(); }) == ErrorCode::ConfigError);
  bad = std_cfg;
  bad.step_size = 0;
  CHECK(code_of([&] { bad.validate(); }) == ErrorCode::ConfigError);

  auto c = AttackConfig::from_preset(Preset::Large);
  c.seed = 99;
  c.smoothing = imaging::SmoothingKernel(2.0, 5);
  const auto back = config_from_json(config_to_json(c));
  CHECK(back.alpha == c.alpha);
  CHECK(back.steps == c.steps);
  CHECK(back.preset == Preset::Large);
  CHECK(back.seed == 99);
  CHECK(back.smoothing.sigma() == 2.0);
  CHECK(back.smoothing.window() == 5);
  CHECK(code_of([] { config_from_json("{\"steps\": \"many\"}"); }) == ErrorCode::ConfigError);
}

TEST_CASE("signed step") {
  Tensor<float> x(3, 4, 5, 0.5f), g(3, 4, 5, 2.0f);
  auto y = signed_step(x, g, 0.0025);
  for (float v : y.values()) CHECK(v == doctest::Approx(0.5025f));

  auto img = imaging::ImageTensor(2, 2, 1.0f);
  const auto clipped = signed_step(img, Tensor<float>(3, 2, 2, 1.0f), 0.1);
  for (float v : clipped.values()) CHECK(v == 1.0f);

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(-1, 1);
  const auto base = testing_support::random_image(6, 7, 2);
  Tensor<float> rg(3, 6, 7);
  for (float& v : rg.values()) v = u(rng);
  rg[0] = 0;
  const auto out = signed_step(base, rg, 0.3);
  for (std::size_t i = 0; i < rg.size(); ++i) {
    const float s = rg[i] > 0 ? 1.0f : (rg[i] < 0 ? -1.0f : 0.0f);
    CHECK(out.values()[i] == std::clamp(base.values()[i] + 0.3f * s, 0.0f, 1.0f));
  }
}

TEST_CASE("objective examples") {
  Fixture f;
  const auto& x = f.scene.image;
  auto cfg = quick(1);

  SUBCASE("identity smoothing at x' = x is exactly zero") {
    cfg.smoothing = imaging::SmoothingKernel::identity();
    CHECK(lowkey_objective(x, x, f.ensemble, f.transforms, cfg) == 0.0);
  }
  SUBCASE("default smoothing at x' = x keeps only the smoothed term") {
    const double v = lowkey_objective(x, x, f.ensemble, f.transforms, cfg);
    CHECK(v >= 0);
    CHECK(v == doctest::Approx(oracle_objective(x, x, f.ensemble, f.transforms, cfg)).epsilon(1e-5));
  }
  SUBCASE("compositional oracle") {
    for (std::uint64_t s = 1; s <= 3; ++s) {
      const auto xp = perturbed(x, 0.03, s);
      const double v = lowkey_objective(x, xp, f.ensemble, f.transforms, cfg);
      const double o = oracle_objective(x, xp, f.ensemble, f.transforms, cfg);
      CHECK(std::abs(v - o) <= 1e-5 * std::max(1.0, std::abs(o)));
    }
  }
  SUBCASE("multi-face aggregation is the mean over faces") {
    auto two = f.transforms;
    two.push_back(f.transforms[0]);
    const auto xp = perturbed(x, 0.03, 4);
    CHECK(lowkey_objective(x, xp, f.ensemble, two, cfg) ==
          doctest::Approx(lowkey_objective(x, xp, f.ensemble, f.transforms, cfg)).epsilon(1e-9));
  }
}

TEST_CASE("objective errors") {
  Fixture f;
  const auto cfg = quick(1);
  CHECK(code_of([&] { LowKeyObjective<float>(f.scene.image.tensor(), {}, f.transforms, cfg); }) ==
        ErrorCode::ConfigError);
  face::AlignmentTransform loose;
  CHECK(code_of([&] { LowKeyObjective<float>(f.scene.image.tensor(), f.ensemble, {loose}, cfg); }) ==
        ErrorCode::ConfigError);

  // A network whose output is identically zero.
  nn::Network<float> net(testing_support::tiny_layers());
  for (float& p : net.params()) p = 0;
  extractors::ExtractorSpec spec{extractors::Backbone::IR50, extractors::Head::ArcFace, "", 8, "zero"};
  Models zero{std::make_shared<extractors::FeatureExtractor>(spec, net)};
  CHECK(code_of([&] { LowKeyObjective<float>(f.scene.image.tensor(), zero, f.transforms, cfg); }) ==
        ErrorCode::DegenerateFeatures);
}

TEST_CASE("objective gradient matches finite differences") {
  Fixture f;
  const auto cfg = quick(1);
  const auto x = f.scene.image.tensor().cast<double>();
  const LowKeyObjective<double> obj(x, f.ensemble, f.transforms, cfg);
  Tensor<double> xp = perturbed(f.scene.image, 0.03, 7).tensor().cast<double>();
  Tensor<double> g;
  const double v = obj.value_and_grad(xp, g);
  CHECK(v == doctest::Approx(obj.value(xp)).epsilon(1e-12));
  std::mt19937_64 rng(8);
  const double h = 1e-6;
  for (int k = 0; k < 20; ++k) {
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, xp.size() - 1)(rng);
    const double orig = xp[i];
    xp[i] = orig + h;
    const double vp = obj.value(xp);
    xp[i] = orig - h;
    const double vm = obj.value(xp);
    xp[i] = orig;
    CHECK(rel_err((vp - vm) / (2 * h), g[i]) < 1e-3);
  }
}

TEST_CASE("protect") {
  Fixture f;
  const auto& x = f.scene.image;

  SUBCASE("zero steps only adds the initial noise") {
    testing_support::ScriptedDetector det(f.dets);
    const auto r = protect(x, f.ensemble, quick(0), det);
    REQUIRE(r.objective_trace.size() == 1);
    for (std::size_t i = 0; i < x.values().size(); ++i)
      CHECK(std::abs(r.protected_image.values()[i] - x.values()[i]) <= 1.0f / 255 + 1e-6f);
    for (const auto& [id, d] : r.per_model_displacement) CHECK(d < 0.05);
  }
  SUBCASE("no face") {
    testing_support::ScriptedDetector none({});
    CHECK(code_of([&] { protect(x, f.ensemble, quick(2), none); }) == ErrorCode::NoFaceFound);
    CHECK(code_of([&] { protect(synth::render_background(96, 96, 3), f.ensemble, quick(2)); }) ==
          ErrorCode::NoFaceFound);
  }
  SUBCASE("ascent with a single detector call") {
    testing_support::CountingDetector det;
    const auto r = protect(x, f.ensemble, quick(8), det);
    CHECK(det.calls == 1);
    REQUIRE(r.objective_trace.size() == 9);
    CHECK(r.objective_trace.back() > r.objective_trace.front());
    CHECK(r.protected_image.same_shape(x));
    CHECK(r.faces_attacked == 1);
    CHECK(r.per_model_displacement.size() == 2);
    CHECK(r.lpips_cost > 0);
    CHECK(r.lpips_network_id == perceptual::kDefaultNetworkId);
    for (float v : r.protected_image.values()) CHECK((v >= 0 && v <= 1));
    const auto j = nlohmann::json::parse(result_summary_json(r));
    CHECK(j.contains("per_model_displacement"));
    CHECK(j.contains("lpips_cost"));
  }
  SUBCASE("determinism") {
    auto cfg = quick(3);
    cfg.seed = 5;
    testing_support::ScriptedDetector d1(f.dets), d2(f.dets), d3(f.dets);
    const auto a = protect(x, f.ensemble, cfg, d1);
    const auto b = protect(x, f.ensemble, cfg, d2);
    CHECK(a.protected_image == b.protected_image);
    CHECK(a.objective_trace == b.objective_trace);
    CHECK(a.per_model_displacement == b.per_model_displacement);
    cfg.seed = 6;
    CHECK(!(protect(x, f.ensemble, cfg, d3).protected_image == a.protected_image));
  }
  SUBCASE("perturbation covers the whole image") {
    testing_support::ScriptedDetector det(f.dets);
    const auto r = protect(x, f.ensemble, quick(4), det);
    const auto& box = f.dets[0].box;
    Tensor<float> masked = r.protected_image.tensor();
    double outside = 0;
    for (int c = 0; c < 3; ++c)
      for (int yy = 0; yy < x.height(); ++yy)
        for (int xx = 0; xx < x.width(); ++xx) {
          if (xx >= box.x0 && xx < box.x1 && yy >= box.y0 && yy < box.y1) continue;
          outside += std::abs(masked.at(c, yy, xx) - x.at(c, yy, xx));
          masked.at(c, yy, xx) = x.at(c, yy, xx);
        }
    CHECK(outside > 0);
    const double cut = perceptual::lpips(x, imaging::clip_to_range(std::move(masked)));
    CHECK(std::abs(cut - r.lpips_cost) > 1e-9);
  }
  SUBCASE("numerical failure carries the trace") {
    auto cfg = quick(3);
    cfg.alpha = 1e300;
    testing_support::ScriptedDetector det(f.dets);
    try {
      protect(x, f.ensemble, cfg, det);
      FAIL("expected NumericalFailure");
    } catch (const NumericalFailure& e) {
      CHECK(e.code() == ErrorCode::NumericalFailure);
      CHECK(!e.trace().empty());
    }
  }
}

TEST_CASE("multi-face selection") {
  synth::Placement left, right;
  left.scale = right.scale = 0.8;
  left.center_x = 60;
  right.center_x = 180;
  left.center_y = right.center_y = 70;
  const auto scene = synth::render_scene({{synth::sample_identity(1), left}, {synth::sample_identity(2), right}},
                                         140, 240, 9);
  face::SkinBlobDetector blob;
  auto dets = face::detect_faces(blob, scene.image);
  REQUIRE(dets.size() == 2);
  const auto ens = testing_support::tiny_ensemble(1);
  auto run = [&](double c0, double c1) {
    auto d = dets;
    d[0].confidence = c0;
    d[1].confidence = c1;
    testing_support::ScriptedDetector det(d);
    return protect(scene.image, ens, quick(1), det).faces_attacked;
  };
  CHECK(run(0.95, 0.92) == 2);
  CHECK(run(0.95, 0.5) == 1);
  CHECK(run(0.6, 0.5) == 1);
}

TEST_CASE("runtime report") {
  const auto ens = testing_support::tiny_ensemble(1);
  const auto rep = benchmark_runtime({testing_support::portrait(3).image}, ens, quick(1));
  REQUIRE(rep.seconds.size() == 1);
  CHECK(rep.seconds[0] > 0);
  CHECK(std::isfinite(rep.mean));
  CHECK(rep.median == rep.seconds[0]);
  const auto j = nlohmann::json::parse(runtime_report_json(rep));
  CHECK(j.at("hardware").get<std::string>().size() > 0);
  CHECK(j.at("per_image_seconds").size() == 1);
  CHECK(j.at("steps") == 1);
  CHECK(code_of([&] { benchmark_runtime({}, ens, quick(1)); }) == ErrorCode::ConfigError);
}
