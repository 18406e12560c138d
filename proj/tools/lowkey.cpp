// lowkey: command-line front end for protection, evaluation and the desk fixture.
#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "lowkey/attack.hpp"
#include "lowkey/desk.hpp"
#include "lowkey/error.hpp"
#include "lowkey/evalbench.hpp"
#include "lowkey/extractors.hpp"
#include "lowkey/service.hpp"
#include "lowkey/synth.hpp"

using namespace lowkey;
using nlohmann::json;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::string& path, const std::string& text) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path);
  out << text << "\n";
}

attack::Models load_models(const std::string& ensemble_path) {
  const std::filesystem::path p(ensemble_path);
  return extractors::load_ensemble(extractors::read_ensemble(p), p.parent_path());
}

struct AttackFlags {
  std::string preset = "standard";
  std::optional<int> steps;
  std::optional<double> alpha;
  std::optional<double> step_size;
  std::uint64_t seed = 0;
  std::string config;

  void add(CLI::App* app) {
    app->add_option("--preset", preset, "small, standard or large")->capture_default_str();
    app->add_option("--steps", steps, "override the preset's step count");
    app->add_option("--alpha", alpha, "override the perceptual penalty");
    app->add_option("--step-size", step_size, "override the step size");
    app->add_option("--seed", seed, "seed of the initial noise")->capture_default_str();
    app->add_option("--config", config, "attack config JSON (flags override it)");
  }

  attack::AttackConfig build() const {
    attack::AttackConfig c = config.empty() ? attack::AttackConfig::from_preset(attack::preset_from_string(preset))
                                            : attack::read_config(config);
    if (steps || alpha || step_size) c.preset = attack::Preset::Custom;
    if (steps) c.steps = *steps;
    if (alpha) c.alpha = *alpha;
    if (step_size) c.step_size = *step_size;
    c.seed = seed;
    c.validate();
    return c;
  }
};

evalbench::EvalProtocol read_protocol(const std::string& path) {
  return path.empty() ? evalbench::EvalProtocol{} : evalbench::protocol_from_json(slurp(path));
}

evalbench::Victim victim_from(const desk::Zoo& zoo, const std::string& id, std::optional<double> defense_sigma) {
  evalbench::Victim v{zoo.find(id), {}};
  if (defense_sigma && *defense_sigma > 0) v.defense = imaging::SmoothingKernel::full_support(*defense_sigma);
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LowKey adversarial face protection and identification benchmark"};
  app.require_subcommand(1);

  // protect
  std::string in_path, out_path, ensemble_path = "zoo/ensemble.json";
  AttackFlags attack_flags;
  auto* protect = app.add_subcommand("protect", "protect one image");
  protect->add_option("input", in_path, "PNG or JPEG image")->required();
  protect->add_option("-o,--output", out_path, "protected PNG")->required();
  protect->add_option("--ensemble", ensemble_path, "ensemble registry JSON")->capture_default_str();
  attack_flags.add(protect);

  // evaluate
  std::string dataset_path, protocol_path, zoo_dir = "zoo", victim_id = "IR50-ArcFace", report_path, cache_dir;
  std::optional<int> jpeg_quality;
  std::optional<double> defense_sigma;
  auto* evaluate = app.add_subcommand("evaluate", "protection benchmark for one victim");
  evaluate->add_option("--dataset", dataset_path, "dataset descriptor JSON")->required();
  evaluate->add_option("--protocol", protocol_path, "protocol JSON");
  evaluate->add_option("--zoo", zoo_dir, "model zoo directory")->capture_default_str();
  evaluate->add_option("--victim", victim_id, "victim model id")->capture_default_str();
  evaluate->add_option("--jpeg", jpeg_quality, "re-encode protected gallery images at this JPEG quality");
  evaluate->add_option("--defense-sigma", defense_sigma, "victim-side blur on aligned crops");
  evaluate->add_option("--cache", cache_dir, "directory for cached protected images");
  evaluate->add_option("-o,--output", report_path, "report JSON")->required();
  attack_flags.add(evaluate);

  // transfer-matrix
  std::vector<std::string> sources, victims;
  bool with_ensemble = false;
  auto* transfer = app.add_subcommand("transfer-matrix", "source x victim grid");
  transfer->add_option("--dataset", dataset_path, "dataset descriptor JSON")->required();
  transfer->add_option("--protocol", protocol_path, "protocol JSON");
  transfer->add_option("--zoo", zoo_dir, "model zoo directory")->capture_default_str();
  transfer->add_option("--sources", sources, "source model ids")->required();
  transfer->add_option("--victims", victims, "victim model ids")->required();
  transfer->add_flag("--with-ensemble", with_ensemble, "add the zoo ensemble as a source row");
  transfer->add_option("--cache", cache_dir, "directory for cached protected images");
  transfer->add_option("-o,--output", report_path, "report JSON")->required();
  attack_flags.add(transfer);

  // train
  std::string spec_path, train_config_path, model_out;
  auto* train = app.add_subcommand("train", "train one extractor");
  train->add_option("--spec", spec_path, "extractor spec JSON")->required();
  train->add_option("--config", train_config_path, "training config JSON");
  train->add_option("--dataset", dataset_path, "dataset descriptor JSON")->required();
  train->add_option("-o,--output", model_out, "weights file")->required();

  // bench-runtime
  std::string bench_dir;
  auto* bench = app.add_subcommand("bench-runtime", "seconds per image over a directory");
  bench->add_option("dir", bench_dir, "directory of PNG/JPEG images")->required();
  bench->add_option("--ensemble", ensemble_path, "ensemble registry JSON")->capture_default_str();
  bench->add_option("-o,--output", report_path, "report JSON");
  attack_flags.add(bench);

  // make-fixture
  std::string fixture_dir;
  int identities = 20, images = 12, distractors = 20;
  std::uint64_t fixture_seed = 202;
  auto* fixture = app.add_subcommand("make-fixture", "write a synthetic desk dataset");
  fixture->add_option("--out", fixture_dir, "output directory")->required();
  fixture->add_option("--identities", identities)->capture_default_str();
  fixture->add_option("--images", images, "images per identity")->capture_default_str();
  fixture->add_option("--distractors", distractors)->capture_default_str();
  fixture->add_option("--seed", fixture_seed)->capture_default_str();

  // desk-zoo
  auto* zoo_cmd = app.add_subcommand("desk-zoo", "train (or reuse) the desk model zoo");
  zoo_cmd->add_option("--out", zoo_dir, "zoo directory")->capture_default_str();

  // serve
  std::string host = "127.0.0.1";
  int port = 8080, workers = 1;
  service::ServiceConfig svc;
  auto* serve = app.add_subcommand("serve", "HTTP protection service");
  serve->add_option("--host", host)->capture_default_str();
  serve->add_option("--port", port)->capture_default_str();
  serve->add_option("--workers", workers)->capture_default_str();
  serve->add_option("--ensemble", ensemble_path, "ensemble registry JSON")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error code=UsageError message=\"%s\"\n", e.what());
    return 2;
  }

  try {
    if (*protect) {
      const auto models = load_models(ensemble_path);
      const auto result = attack::protect(imaging::read_image(in_path), models, attack_flags.build());
      imaging::write_png(out_path, result.protected_image);
      std::cout << attack::result_summary_json(result) << "\n";
    } else if (*evaluate) {
      const auto ds = evalbench::load_dataset(dataset_path);
      const auto zoo = desk::load_zoo(zoo_dir);
      evalbench::Source src{"ensemble", zoo.ensemble_models, attack_flags.build()};
      evalbench::ProtectionCache cache(cache_dir);
      evalbench::EvalOptions opts;
      opts.cache = &cache;
      opts.jpeg_quality = jpeg_quality;
      const auto r = evalbench::run_protection_eval(ds, src, victim_from(zoo, victim_id, defense_sigma),
                                                    read_protocol(protocol_path), opts);
      evalbench::write_report(report_path, r);
      std::cout << evalbench::report_to_json(r) << "\n";
    } else if (*transfer) {
      const auto ds = evalbench::load_dataset(dataset_path);
      const auto zoo = desk::load_zoo(zoo_dir);
      const auto cfg = attack_flags.build();
      std::vector<evalbench::Source> srcs;
      for (const auto& id : sources) srcs.push_back({id, {zoo.find(id)}, cfg});
      std::vector<evalbench::Victim> vics;
      for (const auto& id : victims) vics.push_back(victim_from(zoo, id, std::nullopt));
      std::optional<evalbench::Source> ens;
      if (with_ensemble) ens = evalbench::Source{"ensemble", zoo.ensemble_models, cfg};
      evalbench::ProtectionCache cache(cache_dir);
      evalbench::EvalOptions opts;
      opts.cache = &cache;
      const auto r = evalbench::run_transfer_matrix(ds, srcs, vics, read_protocol(protocol_path), ens, opts);
      evalbench::write_report(report_path, r);
      std::cout << evalbench::report_to_json(r) << "\n";
    } else if (*train) {
      const auto spec = extractors::spec_from_json(slurp(spec_path));
      const auto cfg = train_config_path.empty() ? desk::DeskConfig::default_train_config()
                                                 : extractors::train_config_from_json(slurp(train_config_path));
      const auto crops = desk::labeled_crops(evalbench::load_dataset(dataset_path));
      const auto result = extractors::train_extractor(spec, crops, cfg);
      extractors::save_model(model_out, spec, result.network);
      std::cout << extractors::train_log_to_json(result.log) << "\n";
    } else if (*bench) {
      std::vector<imaging::ImageTensor> imgs;
      std::vector<std::filesystem::path> files;
      for (const auto& e : std::filesystem::directory_iterator(bench_dir)) {
        const auto ext = e.path().extension().string();
        if (ext == ".png" || ext == ".jpg" || ext == ".jpeg") files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      for (const auto& f : files) imgs.push_back(imaging::read_image(f));
      const auto rep = attack::benchmark_runtime(imgs, load_models(ensemble_path), attack_flags.build());
      const auto text = attack::runtime_report_json(rep);
      if (!report_path.empty()) spit(report_path, text);
      std::cout << text << "\n";
    } else if (*fixture) {
      const auto s = synth::make_dataset(identities, images, fixture_seed, distractors, "person");
      evalbench::Dataset ds;
      ds.name = "synthetic-" + std::to_string(fixture_seed);
      for (const auto& im : s.images)
        ds.images.push_back({im.image_id, im.identity.empty() ? evalbench::kUnknownIdentity : im.identity, "", im.image});
      const std::filesystem::path dir(fixture_dir);
      std::filesystem::create_directories(dir);
      evalbench::save_dataset(dir / "dataset.json", ds);
      evalbench::EvalProtocol p;
      p.protected_identity_count = std::min(5, identities);
      spit((dir / "protocol.json").string(), evalbench::protocol_to_json(p));
      imaging::write_png(dir / "face.png", s.images.front().image);
      imaging::write_png(dir / "noface.png", synth::render_background(128, 128, fixture_seed));
      std::cout << "wrote " << ds.images.size() << " images to " << dir.string() << "\n";
    } else if (*zoo_cmd) {
      const auto zoo = desk::build_zoo(zoo_dir, {}, true);
      std::cout << "zoo ready in " << zoo.dir.string() << " (" << zoo.ensemble_models.size() << " ensemble, "
                << zoo.held_out_models.size() << " held out)\n";
    } else if (*serve) {
      svc.workers = workers;
      svc = service::ServiceConfig::from_env(svc);
      const auto models = load_models(ensemble_path);
      service::JobService jobs(svc, [models](const imaging::ImageTensor& img, const attack::AttackConfig& cfg) {
        return attack::protect(img, models, cfg);
      });
      service::HttpApi api(jobs);
      std::fprintf(stderr, "serving on %s:%d, storage %s, ttl %llds\n", host.c_str(), port, svc.storage.c_str(),
                   static_cast<long long>(svc.ttl.count()));
      if (!api.listen(host, port)) fail(ErrorCode::IoError, "cannot listen on " + host + ":" + std::to_string(port));
    }
  } catch (const Error& e) {
    std::string msg = e.what();
    for (auto& ch : msg)
      if (ch == '"' || ch == '\n') ch = '\'';
    std::fprintf(stderr, "error code=%s message=\"%s\"\n", std::string(e.code_name()).c_str(), msg.c_str());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error code=InternalError message=\"%s\"\n", e.what());
    return 2;
  }
  return 0;
}
