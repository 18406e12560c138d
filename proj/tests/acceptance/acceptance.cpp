// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
// Needs a trained desk zoo (lowkey desk-zoo --out <dir>).
#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "../support/fixtures.hpp"
#include "lowkey/attack.hpp"
#include "lowkey/desk.hpp"
#include "lowkey/error.hpp"
#include "lowkey/evalbench.hpp"
#include "lowkey/perceptual.hpp"

using namespace lowkey;
using nlohmann::json;
using testing_support::rel_err;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;
json summary = json::array();

void verdict(const std::string& name, bool ok, const std::string& detail) {
  std::printf("%s %s: %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
  summary.push_back({{"criterion", name}, {"pass", ok}, {"detail", detail}});
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

imaging::ImageTensor jitter(const imaging::ImageTensor& x, double eps, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1, 1);
  Tensor<float> t = x.tensor();
  for (float& v : t.values()) v += static_cast<float>(eps) * u(rng);
  return imaging::clip_to_range(std::move(t));
}

std::vector<face::AlignmentTransform> align_all(const imaging::ImageTensor& img) {
  face::SkinBlobDetector det;
  std::vector<face::AlignmentTransform> out;
  for (const auto& d : face::detect_faces(det, img)) out.push_back(face::build_alignment(d));
  if (out.empty()) fail(ErrorCode::NoFaceFound, "fixture image without a face");
  return out;
}

// ---------------------------------------------------------------- oracles

double mirror_conv(const Tensor<double>& t, int c, int y, int x, double sigma, int window) {
  const int r = window / 2;
  auto mirror = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  double norm = 0, acc = 0;
  for (int dy = -r; dy <= r; ++dy)
    for (int dx = -r; dx <= r; ++dx) {
      const double g = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      norm += g;
      acc += g * t.at(c, mirror(y + dy, t.height()), mirror(x + dx, t.width()));
    }
  return acc / norm;
}

double squared_shift(const imaging::ImageTensor& b, const extractors::FeatureExtractor& m,
                     const face::AlignmentTransform& t, const std::vector<float>& clean) {
  const auto f = m.extract(face::apply_alignment(b, t)).values;
  const double d = extractors::l2_distance(clean, f);
  return d * d;
}

double compositional_objective(const imaging::ImageTensor& x, const imaging::ImageTensor& xp, const attack::Models& ens,
                               const std::vector<face::AlignmentTransform>& ts, const attack::AttackConfig& cfg) {
  const auto gx = imaging::gaussian_smooth(xp, cfg.smoothing);
  double total = 0;
  for (const auto& t : ts) {
    double per_face = 0;
    for (const auto& m : ens) {
      const auto clean = m->extract(face::apply_alignment(x, t)).values;
      per_face += (squared_shift(xp, *m, t, clean) + squared_shift(gx, *m, t, clean)) /
                  extractors::l2_norm(clean);
    }
    total += per_face / (2.0 * ens.size());
  }
  return total / ts.size() - cfg.alpha * perceptual::lpips(x, xp);
}

void oracle_suite(const attack::Models& zoo_ensemble) {
  const auto t0 = Clock::now();

  double smooth_worst = 0;
  for (auto [sigma, window, h, w] :
       {std::tuple{3.0, 7, 64, 48}, {2.0, 13, 40, 40}, {1.0, 5, 23, 31}, {3.0, 7, 112, 112}}) {
    const auto img = testing_support::random_image(h, w, 7 + window + h);
    const auto out = imaging::gaussian_smooth(img, imaging::SmoothingKernel(sigma, window));
    const auto ref = img.tensor().cast<double>();
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          smooth_worst = std::max(smooth_worst, std::abs(out.at(c, y, x) - mirror_conv(ref, c, y, x, sigma, window)));
  }

  // 200 random galleries, 20 probes each, against an exhaustive sort.
  std::mt19937_64 rng(17);
  std::normal_distribution<float> g(0, 1);
  int rank_mismatch = 0, rank_cases = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t dim = 8 + trial % 24, n = 30 + trial % 50;
    const auto metric = trial % 2 ? evalbench::Metric::Cosine : evalbench::Metric::L2;
    evalbench::GalleryIndex index("oracle", metric);
    std::vector<std::vector<float>> rows(n, std::vector<float>(dim));
    std::vector<std::string> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
      for (auto& v : rows[i]) v = g(rng);
      labels[i] = "p" + std::to_string(i % 7);
      index.add(rows[i], labels[i], fmt("i%04zu", i));
    }
    for (int q = 0; q < 20; ++q) {
      std::vector<float> probe(dim);
      for (auto& v : probe) v = g(rng);
      std::vector<std::pair<double, std::size_t>> scan;
      for (std::size_t i = 0; i < n; ++i) {
        double d = 0;
        if (metric == evalbench::Metric::L2) {
          for (std::size_t k = 0; k < dim; ++k) {
            const double e = double(probe[k]) - rows[i][k];
            d += e * e;
          }
          d = std::sqrt(d);
        } else {
          double ab = 0, aa = 0, bb = 0;
          for (std::size_t k = 0; k < dim; ++k) {
            ab += double(probe[k]) * rows[i][k];
            aa += double(probe[k]) * probe[k];
            bb += double(rows[i][k]) * rows[i][k];
          }
          d = 1 - ab / (std::sqrt(aa) * std::sqrt(bb));
        }
        scan.push_back({d, i});
      }
      std::sort(scan.begin(), scan.end());
      const int k = 1 + q % 10;
      const std::string who = "p" + std::to_string(q % 7);
      const auto r = evalbench::rank_k_query(index, probe, who, k);
      bool hit = false, same = r.matches.size() == std::size_t(k);
      for (int j = 0; j < k && same; ++j) {
        same = r.matches[j].entry == scan[j].second && rel_err(r.matches[j].distance, scan[j].first) < 1e-12;
        hit = hit || labels[scan[j].second] == who;
      }
      ++rank_cases;
      if (!same || r.success != hit) ++rank_mismatch;
    }
  }

  int step_mismatch = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto base = testing_support::random_image(16, 16, 100 + trial);
    Tensor<float> grad(3, 16, 16);
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = i % 11 == 0 ? 0.0f : g(rng);
    const double eta = 0.0025 * (1 + trial);
    const auto out = attack::signed_step(base, grad, eta);
    for (std::size_t i = 0; i < grad.size(); ++i) {
      const float s = grad[i] > 0 ? 1.0f : (grad[i] < 0 ? -1.0f : 0.0f);
      if (out.values()[i] != std::clamp(base.values()[i] + static_cast<float>(eta) * s, 0.0f, 1.0f)) ++step_mismatch;
    }
  }

  double obj_worst = 0;
  const auto cfg = attack::AttackConfig::from_preset(attack::Preset::Standard);
  for (std::uint64_t s = 1; s <= 3; ++s) {
    const auto x = testing_support::portrait(40 + s).image;
    const auto ts = align_all(x);
    const auto xp = jitter(x, 0.03, s);
    const double v = attack::lowkey_objective(x, xp, zoo_ensemble, ts, cfg);
    const double o = compositional_objective(x, xp, zoo_ensemble, ts, cfg);
    obj_worst = std::max(obj_worst, std::abs(v - o) / std::max(1.0, std::abs(o)));
  }

  const double secs = seconds_since(t0);
  const bool ok = smooth_worst <= 1e-6 && rank_mismatch == 0 && step_mismatch == 0 && obj_worst <= 1e-5 && secs < 120;
  verdict("oracle-suite", ok,
          fmt("smooth max err %.2e (<=1e-6), rank-k mismatches %d/%d, signed-step mismatches %d, objective rel err "
              "%.2e (<=1e-5), %.1f s (<120)",
              smooth_worst, rank_mismatch, rank_cases, step_mismatch, obj_worst, secs));
}

// ---------------------------------------------------------------- gradients

void gradient_suite() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(23);
  auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };

  const auto scene = testing_support::portrait(31);
  const auto ts = align_all(scene.image);
  const auto ens = testing_support::tiny_ensemble(2);
  auto cfg = attack::AttackConfig::from_preset(attack::Preset::Standard);

  // Objective.
  double obj_worst = 0;
  {
    const auto x = scene.image.tensor().cast<double>();
    const attack::LowKeyObjective<double> obj(x, ens, ts, cfg);
    Tensor<double> xp = jitter(scene.image, 0.03, 5).tensor().cast<double>();
    Tensor<double> grad;
    obj.value_and_grad(xp, grad);
    const double h = 1e-6;
    for (int k = 0; k < 20; ++k) {
      const std::size_t i = pick(xp.size());
      const double orig = xp[i];
      xp[i] = orig + h;
      const double vp = obj.value(xp);
      xp[i] = orig - h;
      const double vm = obj.value(xp);
      xp[i] = orig;
      obj_worst = std::max(obj_worst, rel_err((vp - vm) / (2 * h), grad[i]));
    }
  }

  // Perceptual distance.
  double lpips_worst = 0;
  {
    const auto& m = perceptual::default_metric();
    const auto x = scene.image.tensor().cast<double>();
    Tensor<double> y = jitter(scene.image, 0.05, 6).tensor().cast<double>();
    const auto ref = m.features(x);
    Tensor<double> grad;
    m.distance_to(ref, y, &grad);
    const double h = 1e-5;
    for (int k = 0; k < 20; ++k) {
      const std::size_t i = pick(y.size());
      const double orig = y[i];
      y[i] = orig + h;
      const double dp = m.distance_to(ref, y);
      y[i] = orig - h;
      const double dm = m.distance_to(ref, y);
      y[i] = orig;
      lpips_worst = std::max(lpips_worst, rel_err((dp - dm) / (2 * h), grad[i]));
    }
  }

  // Alignment warp, through a random linear read-out of the crop.
  double warp_worst = 0;
  {
    const face::FaceWarp warp(ts[0], scene.image.height(), scene.image.width());
    Tensor<double> r(3, face::kCropSize, face::kCropSize);
    std::uniform_real_distribution<double> u(-1, 1);
    for (double& v : r.values()) v = u(rng);
    auto loss = [&](const Tensor<double>& in) {
      const auto y = warp.forward(in);
      double s = 0;
      for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * r[i];
      return s;
    };
    const auto grad = warp.adjoint(r);
    const auto reach = warp.adjoint(Tensor<double>(3, face::kCropSize, face::kCropSize, 1.0));
    std::vector<std::size_t> support;
    for (std::size_t i = 0; i < reach.size(); ++i)
      if (reach[i] > 1e-3) support.push_back(i);
    Tensor<double> x = scene.image.tensor().cast<double>();
    const double h = 1e-4;
    for (int k = 0; k < 20; ++k) {
      const std::size_t i = support[pick(support.size())];
      const double orig = x[i];
      x[i] = orig + h;
      const double lp = loss(x);
      x[i] = orig - h;
      const double lm = loss(x);
      x[i] = orig;
      warp_worst = std::max(warp_worst, rel_err((lp - lm) / (2 * h), grad[i]));
    }
  }

  const double secs = seconds_since(t0);
  const bool ok = obj_worst < 1e-3 && lpips_worst < 1e-3 && warp_worst < 1e-3 && secs < 600;
  verdict("gradient-suite", ok,
          fmt("max rel err objective %.2e, lpips %.2e, warp %.2e (<1e-3, 20 coords each), %.1f s (<600)", obj_worst,
              lpips_worst, warp_worst, secs));
}

// ---------------------------------------------------------------- desk experiments

struct Desk {
  desk::Zoo zoo;
  evalbench::Dataset data;
  evalbench::EvalProtocol protocol;
  attack::AttackConfig cfg = attack::AttackConfig::from_preset(attack::Preset::Standard);
  evalbench::ProtectionCache cache;
  evalbench::EvalOptions opts;
  std::filesystem::path out;
  double zoo_train_seconds = 0;

  evalbench::Source ensemble_source() const { return {"ensemble", zoo.ensemble_models, cfg}; }
  evalbench::Victim victim(const std::string& id) const { return {zoo.find(id), std::nullopt}; }

  void save(const std::string& name, const evalbench::EvalReport& r) const {
    evalbench::write_report(out / (name + ".json"), r);
  }
};

void ascent_property(Desk& d) {
  int rising = 0;
  double min_disp = 1e300;
  std::vector<double> disps;
  for (std::uint64_t i = 0; i < 10; ++i) {
    const auto img = testing_support::portrait(500 + i).image;
    const auto r = attack::protect(img, d.zoo.ensemble_models, d.cfg);
    if (r.objective_trace.back() > r.objective_trace.front()) ++rising;
    double mean = 0;
    for (const auto& [id, v] : r.per_model_displacement) mean += v / r.per_model_displacement.size();
    disps.push_back(mean);
    min_disp = std::min(min_disp, mean);
  }
  verdict("ascent-property", rising == 10 && min_disp >= 0.3,
          fmt("objective rose on %d/10 faces; min ensemble displacement %.3f (>=0.3)", rising, min_disp));
}

void desk_protection(Desk& d) {
  const auto t0 = Clock::now();
  bool ok = true;
  std::string detail;
  for (const auto& spec : d.zoo.held_out) {
    const auto v = d.victim(spec.model_id());
    const auto r = evalbench::run_protection_eval(d.data, d.ensemble_source(), v, d.protocol, d.opts);
    d.save("protection_" + spec.model_id(), r);
    const auto& clean = r.cell("clean", v.name());
    const auto& prot = r.cell("ensemble", v.name());
    const double c1 = clean.rank_k.at(1), p1 = prot.rank_k.at(1);
    bool ordered = true;
    for (const auto& c : r.cells) ordered = ordered && c.rank_k.at(1) <= c.rank_k.at(50);
    ok = ok && c1 >= 0.8 && p1 <= 0.5 * c1 && ordered;
    detail += fmt("%s clean rank-1 %.2f (>=0.8), protected rank-1 %.2f (<=%.2f), rank-50 %.2f/%.2f, undetected %d; ",
                  v.name().c_str(), c1, p1, 0.5 * c1, clean.rank_k.at(50), prot.rank_k.at(50),
                  prot.undetected_gallery);
  }
  const double secs = seconds_since(t0) + d.zoo_train_seconds;
  ok = ok && secs < 7200;
  detail += fmt("%d identities x %d images, %zu protected; %.0f s incl. %.0f s zoo training (<7200)",
                static_cast<int>(d.data.identities().size()), desk::DeskConfig{}.images_per_identity,
                static_cast<std::size_t>(d.protocol.protected_identity_count),
                secs, d.zoo_train_seconds);
  verdict("desk-protection", ok, detail);
}

void transfer_direction(Desk& d) {
  const std::vector<std::string> source_ids = {"IR152-ArcFace", "RN152-CosFace"};
  std::vector<evalbench::Source> sources;
  for (const auto& id : source_ids) sources.push_back({id, {d.zoo.find(id)}, d.cfg});
  std::vector<evalbench::Victim> victims;
  for (const auto& spec : d.zoo.held_out) victims.push_back(d.victim(spec.model_id()));
  const auto r = evalbench::run_transfer_matrix(d.data, sources, victims, d.protocol, d.ensemble_source(), d.opts);
  d.save("transfer", r);

  bool below_clean = true;
  std::string grid;
  std::map<std::string, double> row_mean;
  for (const auto* s : {&source_ids[0], &source_ids[1]})
    for (const auto& v : victims) {
      const double a = r.accuracy(*s, v.name(), 1), c = r.accuracy("clean", v.name(), 1);
      below_clean = below_clean && a < c;
      row_mean[*s] += a / victims.size();
      grid += fmt("%s->%s %.2f (clean %.2f); ", s->c_str(), v.name().c_str(), a, c);
    }
  for (const auto& v : victims) row_mean["ensemble"] += r.accuracy("ensemble", v.name(), 1) / victims.size();
  const bool ens_best = row_mean["ensemble"] <= row_mean[source_ids[0]] && row_mean["ensemble"] <= row_mean[source_ids[1]];
  verdict("transfer-direction", below_clean && ens_best,
          grid + fmt("row means rank-1: %s %.2f, %s %.2f, ensemble %.2f", source_ids[0].c_str(),
                     row_mean[source_ids[0]], source_ids[1].c_str(), row_mean[source_ids[1]], row_mean["ensemble"]));
}

void smoothing_defense(Desk& d) {
  const auto v = d.victim(d.zoo.held_out.front().model_id());
  const auto r = evalbench::run_smoothing_defense(d.data, d.ensemble_source(), v, d.protocol, 2.0, d.opts);
  d.save("smoothing_defense", r);
  const std::string blurred = v.name() + "+blur";
  const double with = r.accuracy("ensemble+smooth", blurred, 1), without = r.accuracy("ensemble-smooth", blurred, 1);
  const double clean_def = r.accuracy("clean", blurred, 50), clean_undef = r.accuracy("clean", v.name(), 50);
  const bool ok = with <= without && std::abs(clean_def - clean_undef) <= 0.05;
  verdict("smoothing-defense", ok,
          fmt("sigma 2 blur on %s: rank-1 with smoothed term %.2f <= without %.2f; clean rank-50 defended %.2f vs "
              "undefended %.2f (within 0.05); clean rank-1 defended %.2f vs %.2f",
              v.name().c_str(), with, without, clean_def, clean_undef, r.accuracy("clean", blurred, 1),
              r.accuracy("clean", v.name(), 1)));
}

void jpeg_robustness(Desk& d) {
  const auto v = d.victim(d.zoo.held_out.front().model_id());
  const auto j = evalbench::run_jpeg_robustness(d.data, d.ensemble_source(), v, 85, d.protocol, d.opts);
  d.save("jpeg_png", j.png);
  d.save("jpeg_q85", j.jpeg);
  bool ok = true;
  std::string detail;
  for (int k : {1, 50}) {
    const double p = j.png.accuracy("ensemble", v.name(), k), q = j.jpeg.accuracy("ensemble", v.name(), k);
    ok = ok && std::abs(p - q) <= 0.10;
    detail += fmt("rank-%d PNG %.2f vs JPEG85 %.2f; ", k, p, q);
  }
  verdict("jpeg-robustness", ok, detail + "tolerance 0.10");
}

void runtime_harness(Desk& d) {
  std::vector<imaging::ImageTensor> imgs;
  for (std::uint64_t i = 0; i < 3; ++i) imgs.push_back(testing_support::portrait(700 + i).image);
  auto c1 = d.cfg, c2 = d.cfg;
  c1.steps = 10;
  c2.steps = 20;
  const auto r1 = attack::benchmark_runtime(imgs, d.zoo.ensemble_models, c1);
  const auto r2 = attack::benchmark_runtime(imgs, d.zoo.ensemble_models, c2);
  std::ofstream(d.out / "runtime.json") << "[" << attack::runtime_report_json(r1) << ","
                                        << attack::runtime_report_json(r2) << "]\n";
  const double ratio = r2.mean / r1.mean;
  const bool ok = !r1.hardware.empty() && r1.seconds.size() == imgs.size() && r1.mean > 0 && ratio >= 1.5;
  verdict("runtime-harness",
          ok, fmt("%.2f s/image at 10 steps, %.2f s/image at 20 steps, ratio %.2f (>=1.5); hardware \"%s\"", r1.mean,
                  r2.mean, ratio, r1.hardware.c_str()));
}

void determinism(Desk& d) {
  const auto img = testing_support::portrait(901).image;
  auto cfg = d.cfg;
  cfg.seed = 7;
  const auto a = attack::protect(img, d.zoo.ensemble_models, cfg);
  const auto b = attack::protect(img, d.zoo.ensemble_models, cfg);
  const bool same_image = imaging::encode_png(a.protected_image) == imaging::encode_png(b.protected_image);

  // Two independent evaluations, each with its own fresh cache.
  evalbench::EvalProtocol small = d.protocol;
  small.protected_identity_count = 2;
  small.gallery_per_protected = 3;
  const auto v = d.victim(d.zoo.held_out.front().model_id());
  std::string reports[2];
  for (auto& rep : reports) {
    evalbench::ProtectionCache fresh;
    evalbench::EvalOptions o;
    o.cache = &fresh;
    rep = evalbench::report_to_json(evalbench::run_protection_eval(d.data, d.ensemble_source(), v, small, o));
  }
  verdict("determinism", same_image && reports[0] == reports[1],
          fmt("protected PNG bytes %s; EvalReports %s", same_image ? "identical" : "differ",
              reports[0] == reports[1] ? "identical" : "differ"));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LowKey acceptance run"};
  std::string zoo_dir, out_dir = "acceptance-out";
  app.add_option("--zoo", zoo_dir, "desk zoo directory")->required();
  app.add_option("--out", out_dir, "where reports go")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  try {
    Desk d;
    d.zoo = desk::load_zoo(zoo_dir);
    const auto zoo_meta = json::parse(std::ifstream(std::filesystem::path(zoo_dir) / "zoo.json"));
    const json train_seconds = zoo_meta.value("train_seconds", json::object());
    for (const auto& [id, s] : train_seconds.items()) d.zoo_train_seconds += s.get<double>();
    d.data = desk::make_eval_dataset(desk::DeskConfig{});
    d.protocol.protected_identity_count = 5;
    d.out = out_dir;
    std::filesystem::create_directories(d.out);
    d.opts.cache = &d.cache;

    oracle_suite(d.zoo.ensemble_models);
    gradient_suite();
    ascent_property(d);
    desk_protection(d);
    transfer_direction(d);
    smoothing_defense(d);
    jpeg_robustness(d);
    runtime_harness(d);
    determinism(d);
  } catch (const std::exception& e) {
    std::printf("FAIL acceptance-run: aborted with %s\n", e.what());
    return 1;
  }
  std::ofstream(std::filesystem::path(out_dir) / "summary.json") << summary.dump(2) << "\n";
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
