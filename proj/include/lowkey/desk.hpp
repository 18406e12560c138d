#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "lowkey/attack.hpp"
#include "lowkey/evalbench.hpp"
#include "lowkey/extractors.hpp"

// Desk-scale fixture: synthetic identities, a small trained model zoo and
// the experiment layout the acceptance run and the CLI share.
namespace lowkey::desk {

struct DeskConfig {
  int train_identities = 60;
  int eval_identities = 20;
  int images_per_identity = 12;
  int distractors = 20;
  std::uint64_t train_seed = 101;
  std::uint64_t eval_seed = 202;
  int embed_dim = 128;
  extractors::TrainConfig train = default_train_config();

  static extractors::TrainConfig default_train_config();
  std::string fingerprint() const;
};

evalbench::Dataset make_train_dataset(const DeskConfig& cfg);
evalbench::Dataset make_eval_dataset(const DeskConfig& cfg);

// Detect + align every labelled image; images without a face are skipped.
std::vector<extractors::LabeledCrop> labeled_crops(const evalbench::Dataset& ds);

struct Zoo {
  std::filesystem::path dir;
  extractors::Ensemble ensemble;                // attack members
  std::vector<extractors::ExtractorSpec> held_out;  // victims never attacked directly
  std::vector<std::shared_ptr<const extractors::FeatureExtractor>> ensemble_models;
  std::vector<std::shared_ptr<const extractors::FeatureExtractor>> held_out_models;

  std::shared_ptr<const extractors::FeatureExtractor> find(const std::string& model_id) const;
};

std::vector<extractors::ExtractorSpec> zoo_specs(int embed_dim);

// Trains whatever is missing under `dir` (keyed by the config fingerprint),
// writes ensemble.json and zoo.json, then loads everything.
Zoo build_zoo(const std::filesystem::path& dir, const DeskConfig& cfg = {}, bool verbose = false);
Zoo load_zoo(const std::filesystem::path& dir);

}  // namespace lowkey::desk
