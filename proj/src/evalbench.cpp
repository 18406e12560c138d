#include "lowkey/evalbench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "lowkey/error.hpp"
#include "lowkey/kernels.hpp"

namespace lowkey::evalbench {

using nlohmann::json;

std::string to_string(Metric m) { return m == Metric::L2 ? "l2" : "cosine"; }

Metric metric_from_string(const std::string& s) {
  if (s == "l2") return Metric::L2;
  if (s == "cosine") return Metric::Cosine;
  fail(ErrorCode::ConfigError, "unknown distance metric '" + s + "'");
}

namespace {

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) fail(ErrorCode::IoError, "cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string config_hash(const std::string& text) { return hex64(fnv1a(text.data(), text.size())); }

// ---------------------------------------------------------------- datasets

std::vector<std::string> Dataset::identities() const {
  std::set<std::string> s;
  for (const auto& im : images)
    if (im.identity != kUnknownIdentity) s.insert(im.identity);
  return {s.begin(), s.end()};
}

std::size_t Dataset::distractor_count() const {
  return static_cast<std::size_t>(
      std::count_if(images.begin(), images.end(), [](const DatasetImage& im) { return im.identity == kUnknownIdentity; }));
}

Dataset filter_near_duplicates(Dataset ds, int threshold) {
  std::vector<DatasetImage> kept;
  std::vector<std::uint64_t> hashes;
  int removed = 0;
  for (auto& im : ds.images) {
    const std::uint64_t h = imaging::difference_hash(im.image);
    bool dup = false;
    for (std::uint64_t k : hashes)
      if (imaging::hamming_distance(h, k) <= threshold) {
        dup = true;
        break;
      }
    if (dup) {
      ++removed;
      continue;
    }
    hashes.push_back(h);
    kept.push_back(std::move(im));
  }
  ds.images = std::move(kept);
  ds.duplicate_threshold = threshold;
  ds.duplicates_removed += removed;
  return ds;
}

Dataset load_dataset(const std::filesystem::path& descriptor) {
  json j;
  try {
    j = json::parse(read_text(descriptor));
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, "dataset descriptor is not valid JSON: " + std::string(e.what()));
  }
  Dataset ds;
  try {
    ds.name = j.value("name", std::string("dataset"));
    ds.duplicate_threshold = j.value("duplicate_threshold", -1);
    const auto base = descriptor.parent_path();
    for (const auto& e : j.at("images")) {
      DatasetImage im;
      im.image_id = e.at("id").get<std::string>();
      im.identity = e.value("identity", std::string(kUnknownIdentity));
      if (im.identity.empty()) im.identity = kUnknownIdentity;
      im.path = e.at("path").get<std::string>();
      im.image = imaging::read_image(base / im.path);
      ds.images.push_back(std::move(im));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, "dataset descriptor is malformed: " + std::string(e.what()));
  }
  if (ds.duplicate_threshold >= 0) ds = filter_near_duplicates(std::move(ds), ds.duplicate_threshold);
  return ds;
}

void save_dataset(const std::filesystem::path& descriptor, const Dataset& ds) {
  json images = json::array();
  const auto base = descriptor.parent_path();
  for (const auto& im : ds.images) {
    const std::string rel = im.path.empty() ? "images/" + im.image_id + ".png" : im.path;
    const auto full = base / rel;
    std::filesystem::create_directories(full.parent_path());
    imaging::write_png(full, im.image);
    images.push_back({{"id", im.image_id}, {"identity", im.identity}, {"path", rel}});
  }
  json j{{"name", ds.name}, {"duplicate_threshold", ds.duplicate_threshold}, {"images", images}};
  std::ofstream out(descriptor);
  if (!out) fail(ErrorCode::IoError, "cannot write " + descriptor.string());
  out << j.dump(2) << "\n";
}

// ---------------------------------------------------------------- protocol

void EvalProtocol::validate() const {
  if (!(probe_fraction > 0 && probe_fraction < 1)) fail(ErrorCode::ConfigError, "probe_fraction must be in (0, 1)");
  if (protected_identity_count < 0) fail(ErrorCode::ConfigError, "protected_identity_count must be >= 0");
  if (rank_ks.empty()) fail(ErrorCode::ConfigError, "rank_ks must not be empty");
  for (int k : rank_ks)
    if (k < 1) fail(ErrorCode::ConfigError, "rank k must be >= 1");
  if (folds < 1) fail(ErrorCode::ConfigError, "folds must be >= 1");
  if (!(probe_scale > 0 && probe_scale <= 1)) fail(ErrorCode::ConfigError, "probe_scale must be in (0, 1]");
}

std::string protocol_to_json(const EvalProtocol& p) {
  json j{{"probe_fraction", p.probe_fraction}, {"protected_identity_count", p.protected_identity_count},
         {"rank_ks", p.rank_ks},               {"seed", p.seed},
         {"metric", to_string(p.metric)},      {"folds", p.folds},
         {"gallery_per_protected", p.gallery_per_protected}, {"probe_scale", p.probe_scale}};
  return j.dump(2);
}

EvalProtocol protocol_from_json(const std::string& text) {
  EvalProtocol p;
  try {
    const json j = json::parse(text);
    p.probe_fraction = j.value("probe_fraction", p.probe_fraction);
    p.protected_identity_count = j.value("protected_identity_count", p.protected_identity_count);
    p.rank_ks = j.value("rank_ks", p.rank_ks);
    p.seed = j.value("seed", p.seed);
    p.metric = metric_from_string(j.value("metric", std::string("l2")));
    p.folds = j.value("folds", p.folds);
    p.gallery_per_protected = j.value("gallery_per_protected", p.gallery_per_protected);
    p.probe_scale = j.value("probe_scale", p.probe_scale);
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, "protocol is not valid: " + std::string(e.what()));
  }
  p.validate();
  return p;
}

Split split_gallery_probe(const Dataset& ds, const EvalProtocol& protocol) {
  protocol.validate();
  std::map<std::string, std::vector<std::size_t>> by_id;
  Split s;
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    if (ds.images[i].identity == kUnknownIdentity)
      s.gallery.push_back(i);
    else
      by_id[ds.images[i].identity].push_back(i);
  }
  for (auto& [id, idx] : by_id) {
    if (idx.size() < 2)
      fail(ErrorCode::SplitError, "identity '" + id + "' has fewer than two images");
    std::mt19937_64 rng(protocol.seed ^ fnv1a(id.data(), id.size()));
    std::shuffle(idx.begin(), idx.end(), rng);
    std::size_t np = static_cast<std::size_t>(std::ceil(protocol.probe_fraction * idx.size() - 1e-9));
    np = std::clamp<std::size_t>(np, 1, idx.size() - 1);
    s.probes.insert(s.probes.end(), idx.begin(), idx.begin() + np);
    s.gallery.insert(s.gallery.end(), idx.begin() + np, idx.end());
  }
  std::sort(s.gallery.begin(), s.gallery.end());
  std::sort(s.probes.begin(), s.probes.end());

  std::vector<std::string> ids;
  for (const auto& [id, idx] : by_id) ids.push_back(id);
  std::mt19937_64 rng(protocol.seed);
  std::shuffle(ids.begin(), ids.end(), rng);
  const std::size_t count = std::min<std::size_t>(protocol.protected_identity_count, ids.size());
  if (count * protocol.folds > ids.size())
    fail(ErrorCode::ConfigError, "folds x protected_identity_count exceeds the identity count");
  for (int f = 0; f < protocol.folds; ++f) {
    std::vector<std::string> fold(ids.begin() + f * count, ids.begin() + (f + 1) * count);
    std::sort(fold.begin(), fold.end());
    s.protected_identities.push_back(std::move(fold));
  }
  return s;
}

// ---------------------------------------------------------------- index

double GalleryIndex::distance(std::span<const float> a, std::span<const float> b) const {
  if (metric_ == Metric::L2) return extractors::l2_distance(a, b);
  return 1.0 - extractors::cosine_similarity(a, b);
}

void GalleryIndex::add(std::vector<float> features, std::string identity, std::string image_id) {
  if (!entries_.empty() && features.size() != entries_.front().features.size())
    fail(ErrorCode::ShapeMismatch, "gallery feature dimension mismatch");
  if (ids_.count(image_id)) fail(ErrorCode::ConfigError, "duplicate gallery image id '" + image_id + "'");
  ids_[image_id] = entries_.size();
  rows_.insert(rows_.end(), features.begin(), features.end());
  norms_.push_back(extractors::l2_norm(features));
  entries_.push_back({std::move(features), std::move(identity), std::move(image_id)});
}

std::vector<double> GalleryIndex::distances(std::span<const float> probe) const {
  std::vector<double> out(entries_.size());
  if (entries_.empty()) return out;
  const std::size_t dim = entries_.front().features.size();
  if (metric_ == Metric::L2) {
    kernels::squared_l2_rows(probe, rows_, dim, out);
    for (double& d : out) d = std::sqrt(d);
  } else {
    kernels::dot_rows(probe, rows_, dim, out);
    const double pn = extractors::l2_norm(probe);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double denom = pn * norms_[i];
      out[i] = denom > 0 ? 1.0 - out[i] / denom : 1.0;
    }
  }
  return out;
}

QueryResult rank_k_query(const GalleryIndex& index, std::span<const float> probe, const std::string& probe_identity,
                         int k) {
  if (index.size() == 0) fail(ErrorCode::EmptyGallery, "gallery index is empty");
  if (k < 1) fail(ErrorCode::ConfigError, "k must be >= 1");
  const auto& entries = index.entries();
  if (probe.size() != entries.front().features.size())
    fail(ErrorCode::ShapeMismatch, "probe dimension does not match the gallery");
  const std::vector<double> dist = index.distances(probe);
  std::vector<Match> all(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) all[i] = {i, entries[i].image_id, entries[i].identity, dist[i]};
  const std::size_t kk = std::min<std::size_t>(k, all.size());
  std::partial_sort(all.begin(), all.begin() + kk, all.end(), [](const Match& a, const Match& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.image_id < b.image_id;
  });
  all.resize(kk);
  QueryResult r;
  r.matches = std::move(all);
  for (const auto& m : r.matches)
    if (m.identity == probe_identity && probe_identity != kUnknownIdentity) r.success = true;
  return r;
}

// ---------------------------------------------------------------- victims and sources

std::string Victim::name() const {
  return model->model_id() + (defense ? "+blur" : "");
}

std::optional<std::vector<float>> Victim::featurize(const imaging::ImageTensor& img) const {
  face::SkinBlobDetector detector;
  const auto dets = face::detect_faces(detector, img);
  if (dets.empty()) return std::nullopt;
  face::AlignedFace aligned;
  try {
    aligned = face::align_detection(img, dets.front());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::DegenerateLandmarks) return std::nullopt;
    throw;
  }
  if (defense) aligned.crop = imaging::gaussian_smooth(aligned.crop, *defense);
  return model->extract(aligned).values;
}

std::string Source::cache_key() const {
  std::string text = attack::config_to_json(config);
  // Weights by content, so moving a zoo keeps its cache valid.
  for (const auto& m : ensemble) {
    const auto p = m->network().params();
    text += "|" + m->model_id() + "@" + hex64(fnv1a(p.data(), p.size_bytes()));
  }
  return config_hash(text);
}

imaging::ImageTensor ProtectionCache::protect(const Source& src, const DatasetImage& img) {
  const auto px = img.image.values();
  const std::string key = src.cache_key() + "_" + hex64(fnv1a(px.data(), px.size_bytes()));
  if (auto it = memory_.find(key); it != memory_.end()) {
    ++hits_;
    return it->second;
  }
  const std::filesystem::path file = dir_.empty() ? std::filesystem::path() : dir_ / (key + ".png");
  if (!file.empty() && std::filesystem::exists(file)) {
    ++hits_;
    auto decoded = imaging::read_image(file);
    memory_[key] = decoded;
    return decoded;
  }
  auto result = attack::protect(img.image, src.ensemble, src.config);
  // Quantise through the PNG codec so a cache hit and a miss agree exactly.
  auto out = imaging::decode(imaging::encode_png(result.protected_image));
  if (!file.empty()) {
    std::filesystem::create_directories(dir_);
    const auto tmp = file.string() + ".tmp";
    imaging::write_png(tmp, out);
    std::filesystem::rename(tmp, file);
  }
  ++computed_;
  memory_[key] = out;
  return out;
}

// ---------------------------------------------------------------- evaluation

namespace {

class Evaluator {
 public:
  Evaluator(const Dataset& ds, const EvalProtocol& protocol, const EvalOptions& opts)
      : ds_(ds), protocol_(protocol), split_(split_gallery_probe(ds, protocol)), opts_(opts) {
    if (!opts_.cache) {
      own_cache_ = std::make_unique<ProtectionCache>();
      opts_.cache = own_cache_.get();
    }
    if (opts_.jpeg_quality && (*opts_.jpeg_quality < 1 || *opts_.jpeg_quality > 100))
      fail(ErrorCode::InvalidQuality, "JPEG quality must be in [1, 100]");
  }

  // source == nullptr gives the clean cell.
  CellResult run(const Source* source, const Victim& victim) {
    CellResult cell;
    cell.source = source ? source->name : "clean";
    cell.victim = victim.name();
    std::map<int, int> hits, all_hits;
    int probes = 0, all_probes = 0;
    const bool none_protected = split_.protected_identities.empty() || split_.protected_identities.front().empty();
    for (const auto& fold : split_.protected_identities) {
      const std::set<std::string> prot(fold.begin(), fold.end());
      GalleryIndex index(victim.model->model_id(), protocol_.metric);
      std::map<std::string, int> kept;
      for (std::size_t gi : split_.gallery) {
        const DatasetImage& im = ds_.images[gi];
        const bool is_prot = prot.count(im.identity) > 0;
        if (is_prot && protocol_.gallery_per_protected >= 0 && kept[im.identity]++ >= protocol_.gallery_per_protected)
          continue;
        std::optional<std::vector<float>> f;
        if (is_prot && source) {
          imaging::ImageTensor p = opts_.cache->protect(*source, im);
          if (opts_.jpeg_quality) p = imaging::decode(imaging::encode_jpeg(p, *opts_.jpeg_quality));
          f = victim.featurize(p);
        } else {
          f = clean(victim, gi);
        }
        if (!f) {
          ++cell.undetected_gallery;
          continue;
        }
        index.add(std::move(*f), im.identity, im.image_id);
      }
      cell.gallery_size = static_cast<int>(index.size());
      for (std::size_t pi : split_.probes) {
        const DatasetImage& im = ds_.images[pi];
        const auto& f = probe(victim, pi);
        const bool counted = none_protected || prot.count(im.identity) > 0;
        for (int k : protocol_.rank_ks) {
          const bool ok = f && index.size() > 0 && rank_k_query(index, *f, im.identity, k).success;
          if (counted) hits[k] += ok;
          all_hits[k] += ok;
        }
        if (counted) ++probes;
        ++all_probes;
      }
    }
    cell.probes = probes;
    for (int k : protocol_.rank_ks) {
      cell.rank_k[k] = probes ? static_cast<double>(hits[k]) / probes : 0.0;
      cell.all_rank_k[k] = all_probes ? static_cast<double>(all_hits[k]) / all_probes : 0.0;
    }
    return cell;
  }

  EvalReport blank(const std::string& experiment, const std::vector<const Source*>& sources) const {
    EvalReport r;
    r.experiment = experiment;
    r.protocol = protocol_;
    r.dataset_name = ds_.name;
    r.dataset_images = static_cast<int>(ds_.images.size());
    r.dataset_identities = static_cast<int>(ds_.identities().size());
    r.dataset_distractors = static_cast<int>(ds_.distractor_count());
    r.duplicate_threshold = ds_.duplicate_threshold;
    std::string keys;
    for (const Source* s : sources) keys += s->name + "=" + s->cache_key() + ";";
    if (opts_.jpeg_quality) keys += "jpeg=" + std::to_string(*opts_.jpeg_quality);
    r.attack_config_hash = config_hash(keys);
    r.lpips_network = perceptual::default_metric().network_id();
    return r;
  }

 private:
  const std::optional<std::vector<float>>& clean(const Victim& v, std::size_t i) {
    auto& per = clean_[v.name() + "|" + v.model->spec().weights_uri];
    auto it = per.find(i);
    if (it == per.end()) it = per.emplace(i, v.featurize(ds_.images[i].image)).first;
    return it->second;
  }

  const std::optional<std::vector<float>>& probe(const Victim& v, std::size_t i) {
    if (protocol_.probe_scale == 1.0) return clean(v, i);
    auto& per = probes_[v.name() + "|" + v.model->spec().weights_uri];
    auto it = per.find(i);
    if (it == per.end()) {
      const auto& img = ds_.images[i].image;
      const int h = std::max(1, static_cast<int>(std::lround(img.height() * protocol_.probe_scale)));
      const int w = std::max(1, static_cast<int>(std::lround(img.width() * protocol_.probe_scale)));
      it = per.emplace(i, v.featurize(imaging::resize_bilinear(img, h, w))).first;
    }
    return it->second;
  }

  const Dataset& ds_;
  EvalProtocol protocol_;
  Split split_;
  EvalOptions opts_;
  std::unique_ptr<ProtectionCache> own_cache_;
  std::map<std::string, std::map<std::size_t, std::optional<std::vector<float>>>> clean_, probes_;
};

}  // namespace

const CellResult& EvalReport::cell(const std::string& source, const std::string& victim) const {
  for (const auto& c : cells)
    if (c.source == source && c.victim == victim) return c;
  fail(ErrorCode::ConfigError, "report has no cell (" + source + ", " + victim + ")");
}

double EvalReport::accuracy(const std::string& source, const std::string& victim, int k) const {
  const auto& c = cell(source, victim);
  const auto it = c.rank_k.find(k);
  if (it == c.rank_k.end()) fail(ErrorCode::ConfigError, "report has no rank-" + std::to_string(k) + " entry");
  return it->second;
}

EvalReport run_protection_eval(const Dataset& ds, const Source& source, const Victim& victim,
                               const EvalProtocol& protocol, const EvalOptions& opts) {
  Evaluator ev(ds, protocol, opts);
  EvalReport r = ev.blank("protection", {&source});
  r.cells.push_back(ev.run(nullptr, victim));
  r.cells.push_back(ev.run(&source, victim));
  return r;
}

EvalReport run_transfer_matrix(const Dataset& ds, const std::vector<Source>& sources, const std::vector<Victim>& victims,
                               const EvalProtocol& protocol, const std::optional<Source>& ensemble_source,
                               const EvalOptions& opts) {
  if (sources.empty() || victims.empty()) fail(ErrorCode::ConfigError, "transfer matrix needs sources and victims");
  Evaluator ev(ds, protocol, opts);
  std::vector<const Source*> all;
  for (const auto& s : sources) all.push_back(&s);
  if (ensemble_source) all.push_back(&*ensemble_source);
  EvalReport r = ev.blank("transfer", all);
  for (const auto& v : victims) r.cells.push_back(ev.run(nullptr, v));
  for (const Source* s : all)
    for (const auto& v : victims) r.cells.push_back(ev.run(s, v));
  return r;
}

EvalReport run_smoothing_defense(const Dataset& ds, const Source& source, const Victim& victim,
                                 const EvalProtocol& protocol, double defense_sigma, const EvalOptions& opts) {
  Source with = source, without = source;
  with.name = source.name + "+smooth";
  with.config.use_smoothed_term = true;
  without.name = source.name + "-smooth";
  without.config.use_smoothed_term = false;
  Victim plain = victim;
  plain.defense.reset();
  Victim blurred = victim;
  if (defense_sigma > 0)
    blurred.defense = imaging::SmoothingKernel::full_support(defense_sigma);
  else
    blurred.defense = imaging::SmoothingKernel::identity();
  Evaluator ev(ds, protocol, opts);
  EvalReport r = ev.blank("smoothing_defense", {&with, &without});
  for (const Victim* v : {&plain, &blurred}) {
    r.cells.push_back(ev.run(nullptr, *v));
    r.cells.push_back(ev.run(&with, *v));
    r.cells.push_back(ev.run(&without, *v));
  }
  return r;
}

JpegReports run_jpeg_robustness(const Dataset& ds, const Source& source, const Victim& victim, int quality,
                                const EvalProtocol& protocol, const EvalOptions& opts) {
  if (quality < 1 || quality > 100) fail(ErrorCode::InvalidQuality, "JPEG quality must be in [1, 100]");
  EvalOptions png = opts;
  png.jpeg_quality.reset();
  EvalOptions jpg = opts;
  jpg.jpeg_quality = quality;
  ProtectionCache local;
  if (!png.cache) png.cache = jpg.cache = &local;
  JpegReports out{run_protection_eval(ds, source, victim, protocol, png),
                  run_protection_eval(ds, source, victim, protocol, jpg)};
  out.png.experiment = "jpeg_robustness/png";
  out.jpeg.experiment = "jpeg_robustness/jpeg" + std::to_string(quality);
  return out;
}

// ---------------------------------------------------------------- reports

namespace {

json rank_map(const std::map<int, double>& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[std::to_string(k)] = v;
  return j;
}

std::map<int, double> rank_map(const json& j) {
  std::map<int, double> m;
  for (auto it = j.begin(); it != j.end(); ++it) m[std::stoi(it.key())] = it.value().get<double>();
  return m;
}

}  // namespace

std::string report_to_json(const EvalReport& r) {
  json cells = json::array();
  for (const auto& c : r.cells)
    cells.push_back({{"source", c.source},
                     {"victim", c.victim},
                     {"rank_k", rank_map(c.rank_k)},
                     {"all_probes_rank_k", rank_map(c.all_rank_k)},
                     {"probes", c.probes},
                     {"gallery_size", c.gallery_size},
                     {"undetected_gallery", c.undetected_gallery}});
  json j{{"experiment", r.experiment},
         {"protocol", json::parse(protocol_to_json(r.protocol))},
         {"dataset",
          {{"name", r.dataset_name},
           {"images", r.dataset_images},
           {"identities", r.dataset_identities},
           {"distractors", r.dataset_distractors},
           {"duplicate_threshold", r.duplicate_threshold}}},
         {"attack_config_hash", r.attack_config_hash},
         {"lpips_network", r.lpips_network},
         {"cells", cells}};
  return j.dump(2);
}

EvalReport report_from_json(const std::string& text) {
  EvalReport r;
  try {
    const json j = json::parse(text);
    r.experiment = j.at("experiment").get<std::string>();
    r.protocol = protocol_from_json(j.at("protocol").dump());
    const auto& d = j.at("dataset");
    r.dataset_name = d.at("name").get<std::string>();
    r.dataset_images = d.at("images").get<int>();
    r.dataset_identities = d.at("identities").get<int>();
    r.dataset_distractors = d.at("distractors").get<int>();
    r.duplicate_threshold = d.at("duplicate_threshold").get<int>();
    r.attack_config_hash = j.at("attack_config_hash").get<std::string>();
    r.lpips_network = j.at("lpips_network").get<std::string>();
    for (const auto& c : j.at("cells")) {
      CellResult cell;
      cell.source = c.at("source").get<std::string>();
      cell.victim = c.at("victim").get<std::string>();
      cell.rank_k = rank_map(c.at("rank_k"));
      cell.all_rank_k = rank_map(c.at("all_probes_rank_k"));
      cell.probes = c.at("probes").get<int>();
      cell.gallery_size = c.at("gallery_size").get<int>();
      cell.undetected_gallery = c.at("undetected_gallery").get<int>();
      r.cells.push_back(std::move(cell));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, "report is malformed: " + std::string(e.what()));
  }
  return r;
}

void write_report(const std::filesystem::path& path, const EvalReport& r) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out << report_to_json(r) << "\n";
}

// ---------------------------------------------------------------- recognizers

GalleryIndex build_index(const Dataset& ds, const std::vector<std::size_t>& images, const Victim& victim, Metric metric) {
  GalleryIndex index(victim.model->model_id(), metric);
  for (std::size_t i : images) {
    auto f = victim.featurize(ds.images.at(i).image);
    if (f) index.add(std::move(*f), ds.images[i].identity, ds.images[i].image_id);
  }
  return index;
}

std::vector<IdentityMatch> LocalRecognizer::identify(const imaging::ImageTensor& probe, int k) {
  const auto f = victim_.featurize(probe);
  if (!f) return {};
  const auto r = rank_k_query(index_, *f, kUnknownIdentity, k);
  std::vector<IdentityMatch> out;
  for (const auto& m : r.matches) out.push_back({m.identity, m.distance});
  return out;
}

std::unique_ptr<Recognizer> recognizer_adapter(const std::string& kind, RecognizerOptions opts) {
  if (kind == "local") {
    if (!opts.victim || !opts.index) fail(ErrorCode::ConfigError, "local recognizer needs a victim and an index");
    return std::make_unique<LocalRecognizer>(std::move(*opts.victim), std::move(*opts.index));
  }
  if (kind == "mock") return std::make_unique<MockRecognizer>(std::move(opts.script));
  fail(ErrorCode::ConfigError, "unknown recognizer kind '" + kind + "'");
}

}  // namespace lowkey::evalbench
