#include "lowkey/desk.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "lowkey/error.hpp"
#include "lowkey/synth.hpp"

namespace lowkey::desk {

using nlohmann::json;

extractors::TrainConfig DeskConfig::default_train_config() {
  // The 120-epoch schedule compressed to 10 epochs. Without batch norm the
  // desk backbones need the smaller rate and a softer logit scale.
  auto c = extractors::TrainConfig::reduced(10, 64);
  c.lr = 0.01;
  c.head_scale = 16;
  // Landmarks wobble by a pixel or so between photos; without jitter the
  // models key on exact alignment.
  c.shift_augment = 2;
  return c;
}

std::string DeskConfig::fingerprint() const {
  json j{{"train_identities", train_identities}, {"images_per_identity", images_per_identity},
         {"train_seed", train_seed},             {"embed_dim", embed_dim},
         {"train", json::parse(extractors::train_config_to_json(train))}};
  return evalbench::config_hash(j.dump());
}

namespace {

evalbench::Dataset to_dataset(synth::SyntheticDataset s, const std::string& name) {
  evalbench::Dataset ds;
  ds.name = name;
  for (auto& im : s.images) {
    evalbench::DatasetImage d;
    d.image_id = im.image_id;
    d.identity = im.identity.empty() ? evalbench::kUnknownIdentity : im.identity;
    d.image = std::move(im.image);
    ds.images.push_back(std::move(d));
  }
  return ds;
}

json read_json(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) fail(ErrorCode::IoError, "cannot read " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, p.string() + " is not valid JSON: " + e.what());
  }
}

}  // namespace

evalbench::Dataset make_train_dataset(const DeskConfig& cfg) {
  return to_dataset(synth::make_dataset(cfg.train_identities, cfg.images_per_identity, cfg.train_seed, 0, "train"),
                    "desk-train");
}

evalbench::Dataset make_eval_dataset(const DeskConfig& cfg) {
  return to_dataset(
      synth::make_dataset(cfg.eval_identities, cfg.images_per_identity, cfg.eval_seed, cfg.distractors, "person"),
      "desk-eval");
}

std::vector<extractors::LabeledCrop> labeled_crops(const evalbench::Dataset& ds) {
  std::map<std::string, int> labels;
  for (const auto& id : ds.identities()) labels.emplace(id, static_cast<int>(labels.size()));
  face::SkinBlobDetector detector;
  std::vector<extractors::LabeledCrop> out;
  for (const auto& im : ds.images) {
    if (im.identity == evalbench::kUnknownIdentity) continue;
    const auto dets = face::detect_faces(detector, im.image);
    if (dets.empty()) continue;
    out.push_back({face::align_detection(im.image, dets.front()).crop.tensor(), labels.at(im.identity)});
  }
  return out;
}

std::vector<extractors::ExtractorSpec> zoo_specs(int embed_dim) {
  using extractors::Backbone;
  using extractors::Head;
  auto members = extractors::Ensemble::default_members(embed_dim).members;
  members.push_back({Backbone::IR50, Head::ArcFace, "", embed_dim, ""});
  members.push_back({Backbone::RN50, Head::CosFace, "", embed_dim, ""});
  return members;
}

std::shared_ptr<const extractors::FeatureExtractor> Zoo::find(const std::string& model_id) const {
  for (const auto* list : {&ensemble_models, &held_out_models})
    for (const auto& m : *list)
      if (m->model_id() == model_id) return m;
  fail(ErrorCode::ConfigError, "model '" + model_id + "' is not in the zoo");
}

Zoo build_zoo(const std::filesystem::path& dir, const DeskConfig& cfg, bool verbose) {
  std::filesystem::create_directories(dir);
  const std::string fp = cfg.fingerprint();
  const auto specs = zoo_specs(cfg.embed_dim);
  std::vector<extractors::LabeledCrop> crops;
  json logs = json::object(), seconds = json::object();
  if (std::filesystem::exists(dir / "zoo.json")) {
    const json old = read_json(dir / "zoo.json");
    if (old.value("fingerprint", std::string()) == fp) {
      logs = old.value("train_logs", json::object());
      seconds = old.value("train_seconds", json::object());
    }
  }
  std::vector<extractors::ExtractorSpec> written;
  for (auto spec : specs) {
    const std::string file = spec.model_id() + "-" + fp + ".lknn";
    spec.weights_uri = file;
    if (!std::filesystem::exists(dir / file)) {
      if (crops.empty()) crops = labeled_crops(make_train_dataset(cfg));
      auto tc = cfg.train;
      const std::string id = spec.model_id();
      tc.seed = synth::mix_seed(cfg.train.seed, std::hash<std::string>{}(id));
      if (verbose) std::fprintf(stderr, "training %s on %zu crops\n", id.c_str(), crops.size());
      const auto t0 = std::chrono::steady_clock::now();
      auto result = extractors::train_extractor(spec, crops, tc);
      seconds[id] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      extractors::save_model(dir / file, spec, result.network);
      logs[id] = json::parse(extractors::train_log_to_json(result.log));
      if (verbose && !result.log.empty())
        std::fprintf(stderr, "  final loss %.4f accuracy %.3f\n", result.log.back().loss, result.log.back().accuracy);
    }
    written.push_back(spec);
  }
  extractors::Ensemble ens;
  ens.members.assign(written.begin(), written.begin() + 4);
  extractors::write_ensemble(dir / "ensemble.json", ens);
  json held = json::array();
  for (std::size_t i = 4; i < written.size(); ++i) held.push_back(json::parse(extractors::spec_to_json(written[i])));
  json zoo{{"fingerprint", fp}, {"held_out", held}, {"train_logs", logs}, {"train_seconds", seconds}};
  std::ofstream(dir / "zoo.json") << zoo.dump(2) << "\n";
  return load_zoo(dir);
}

Zoo load_zoo(const std::filesystem::path& dir) {
  Zoo z;
  z.dir = dir;
  z.ensemble = extractors::read_ensemble(dir / "ensemble.json");
  z.ensemble_models = extractors::load_ensemble(z.ensemble, dir);
  const json zoo = read_json(dir / "zoo.json");
  for (const auto& h : zoo.at("held_out")) {
    auto spec = extractors::spec_from_json(h.dump());
    extractors::Ensemble one;
    one.members.push_back(spec);
    z.held_out_models.push_back(extractors::load_ensemble(one, dir).front());
    z.held_out.push_back(spec);
  }
  return z;
}

}  // namespace lowkey::desk
