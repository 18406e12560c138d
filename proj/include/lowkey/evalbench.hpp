#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lowkey/attack.hpp"
#include "lowkey/extractors.hpp"
#include "lowkey/face.hpp"
#include "lowkey/imaging.hpp"

namespace lowkey::evalbench {

// Reserved label of distractor images; never counts as a match.
inline constexpr const char* kUnknownIdentity = "unknown";

enum class Metric { L2, Cosine };
std::string to_string(Metric m);
Metric metric_from_string(const std::string& s);

// ---------------------------------------------------------------- datasets

struct DatasetImage {
  std::string image_id;
  std::string identity;  // kUnknownIdentity for distractors
  std::string path;      // relative to the descriptor, may be empty for in-memory sets
  imaging::ImageTensor image;
};

struct Dataset {
  std::string name = "dataset";
  int duplicate_threshold = -1;  // dHash Hamming radius used at ingestion, -1 when unfiltered
  int duplicates_removed = 0;
  std::vector<DatasetImage> images;

  std::vector<std::string> identities() const;  // sorted, distractors excluded
  std::size_t distractor_count() const;
};

// Drops every image whose difference hash lies within `threshold` bits of an
// earlier kept image. Records the threshold on the dataset.
Dataset filter_near_duplicates(Dataset ds, int threshold);

// Descriptor: {"name", "duplicate_threshold", "images": [{"id", "identity", "path"}]}.
Dataset load_dataset(const std::filesystem::path& descriptor);
void save_dataset(const std::filesystem::path& descriptor, const Dataset& ds);

// ---------------------------------------------------------------- protocol

struct EvalProtocol {
  double probe_fraction = 0.1;
  int protected_identity_count = 100;
  std::vector<int> rank_ks = {1, 50};
  std::uint64_t seed = 0;
  Metric metric = Metric::L2;
  // Each fold protects a fresh, disjoint draw of identities; accuracies pool
  // the probes of every fold.
  int folds = 1;
  // Caps the gallery images kept per protected identity; < 0 keeps all.
  int gallery_per_protected = -1;
  // Probes are downscaled by this factor before detection (low-resolution
  // probe experiments); 1 leaves them untouched.
  double probe_scale = 1.0;

  void validate() const;
};

std::string protocol_to_json(const EvalProtocol& p);
EvalProtocol protocol_from_json(const std::string& text);

struct Split {
  std::vector<std::size_t> gallery;  // indices into Dataset::images
  std::vector<std::size_t> probes;
  std::vector<std::vector<std::string>> protected_identities;  // one set per fold
};

// Throws SplitError naming any identity with fewer than two images.
Split split_gallery_probe(const Dataset& ds, const EvalProtocol& protocol);

// ---------------------------------------------------------------- index

struct GalleryEntry {
  std::vector<float> features;
  std::string identity;
  std::string image_id;
};

class GalleryIndex {
 public:
  GalleryIndex(std::string model_id, Metric metric) : model_id_(std::move(model_id)), metric_(metric) {}

  // Throws ShapeMismatch on a dimension change, ConfigError on a repeated id.
  void add(std::vector<float> features, std::string identity, std::string image_id);
  const std::vector<GalleryEntry>& entries() const noexcept { return entries_; }
  const std::string& model_id() const noexcept { return model_id_; }
  Metric metric() const noexcept { return metric_; }
  std::size_t size() const noexcept { return entries_.size(); }
  double distance(std::span<const float> a, std::span<const float> b) const;
  // Distance from `probe` to every entry, in entry order.
  std::vector<double> distances(std::span<const float> probe) const;

 private:
  std::string model_id_;
  Metric metric_;
  std::vector<GalleryEntry> entries_;
  std::vector<float> rows_;    // entries' features, row-major
  std::vector<double> norms_;  // for the cosine metric
  std::map<std::string, std::size_t> ids_;
};

struct Match {
  std::size_t entry = 0;
  std::string image_id;
  std::string identity;
  double distance = 0;
};

struct QueryResult {
  std::vector<Match> matches;
  bool success = false;
};

// Throws EmptyGallery and ShapeMismatch.
QueryResult rank_k_query(const GalleryIndex& index, std::span<const float> probe, const std::string& probe_identity,
                         int k);

// ---------------------------------------------------------------- victims

// A recognizer as seen by the benchmark: own detector, own alignment,
// optional blur on the aligned crop just before inference.
struct Victim {
  std::shared_ptr<const extractors::FeatureExtractor> model;
  std::optional<imaging::SmoothingKernel> defense;

  std::string name() const;
  // Empty when no face is found.
  std::optional<std::vector<float>> featurize(const imaging::ImageTensor& img) const;
};

// Attack source: an ensemble plus the attack settings it runs with.
struct Source {
  std::string name;
  attack::Models ensemble;
  attack::AttackConfig config;

  std::string cache_key() const;
};

// Protected images on disk (PNG, so cached results equal what a user would
// download), keyed by source, config and image content.
class ProtectionCache {
 public:
  explicit ProtectionCache(std::filesystem::path dir = {}) : dir_(std::move(dir)) {}

  imaging::ImageTensor protect(const Source& src, const DatasetImage& img);
  int computed() const noexcept { return computed_; }
  int hits() const noexcept { return hits_; }

 private:
  std::filesystem::path dir_;
  std::map<std::string, imaging::ImageTensor> memory_;
  int computed_ = 0;
  int hits_ = 0;
};

// ---------------------------------------------------------------- reports

struct CellResult {
  std::string source;  // "clean" for the unprotected baseline
  std::string victim;
  std::map<int, double> rank_k;       // over probes of protected identities
  std::map<int, double> all_rank_k;   // over every probe
  int probes = 0;
  int gallery_size = 0;
  int undetected_gallery = 0;
};

struct EvalReport {
  std::string experiment;
  EvalProtocol protocol;
  std::string dataset_name;
  int dataset_images = 0;
  int dataset_identities = 0;
  int dataset_distractors = 0;
  int duplicate_threshold = -1;
  std::string attack_config_hash;
  std::string lpips_network;
  std::vector<CellResult> cells;

  // Throws ConfigError when the cell is missing.
  const CellResult& cell(const std::string& source, const std::string& victim) const;
  double accuracy(const std::string& source, const std::string& victim, int k) const;
};

std::string report_to_json(const EvalReport& r);
EvalReport report_from_json(const std::string& text);
void write_report(const std::filesystem::path& path, const EvalReport& r);

std::string config_hash(const std::string& text);

struct EvalOptions {
  ProtectionCache* cache = nullptr;   // a private in-memory cache when null
  std::optional<int> jpeg_quality;    // re-encode protected gallery images
};

// Clean and protected cells for one source against one victim.
EvalReport run_protection_eval(const Dataset& ds, const Source& source, const Victim& victim,
                               const EvalProtocol& protocol, const EvalOptions& opts = {});

// Rows: clean, each source, then `ensemble_source` when given. Columns: victims.
EvalReport run_transfer_matrix(const Dataset& ds, const std::vector<Source>& sources, const std::vector<Victim>& victims,
                               const EvalProtocol& protocol, const std::optional<Source>& ensemble_source = {},
                               const EvalOptions& opts = {});

// Attack with and without the smoothed term, victim with and without a blur
// defense. Sources are named "<name>+smooth" and "<name>-smooth", victims
// "<model>" and "<model>+blur".
EvalReport run_smoothing_defense(const Dataset& ds, const Source& source, const Victim& victim,
                                 const EvalProtocol& protocol, double defense_sigma = 2.0,
                                 const EvalOptions& opts = {});

struct JpegReports {
  EvalReport png;
  EvalReport jpeg;
};

// Throws InvalidQuality outside [1, 100].
JpegReports run_jpeg_robustness(const Dataset& ds, const Source& source, const Victim& victim, int quality,
                                const EvalProtocol& protocol, const EvalOptions& opts = {});

// ---------------------------------------------------------------- recognizers

struct IdentityMatch {
  std::string identity;
  double distance = 0;
};

class Recognizer {
 public:
  virtual ~Recognizer() = default;
  virtual std::vector<IdentityMatch> identify(const imaging::ImageTensor& probe, int k) = 0;
};

class LocalRecognizer : public Recognizer {
 public:
  LocalRecognizer(Victim victim, GalleryIndex index) : victim_(std::move(victim)), index_(std::move(index)) {}
  std::vector<IdentityMatch> identify(const imaging::ImageTensor& probe, int k) override;
  const GalleryIndex& index() const noexcept { return index_; }

 private:
  Victim victim_;
  GalleryIndex index_;
};

class MockRecognizer : public Recognizer {
 public:
  explicit MockRecognizer(std::vector<IdentityMatch> script) : script_(std::move(script)) {}
  std::vector<IdentityMatch> identify(const imaging::ImageTensor&, int) override { return script_; }

 private:
  std::vector<IdentityMatch> script_;
};

struct RecognizerOptions {
  std::optional<Victim> victim;              // local
  std::optional<GalleryIndex> index;         // local
  std::vector<IdentityMatch> script;         // mock
};

// kind "local" or "mock"; anything else is a ConfigError.
std::unique_ptr<Recognizer> recognizer_adapter(const std::string& kind, RecognizerOptions opts);

// Gallery index of `ds` images (by index) seen through `victim`.
GalleryIndex build_index(const Dataset& ds, const std::vector<std::size_t>& images, const Victim& victim, Metric metric);

}  // namespace lowkey::evalbench
