#include "lowkey/service.hpp"

#include <cstdlib>
#include <fstream>
#include <random>

#include <httplib.h>
#include <json.hpp>

#include "lowkey/error.hpp"

namespace lowkey::service {

using nlohmann::json;

ServiceConfig ServiceConfig::from_env(ServiceConfig base) {
  if (const char* s = std::getenv("LOWKEY_STORAGE"); s && *s) base.storage = s;
  if (const char* t = std::getenv("LOWKEY_TTL_SECONDS"); t && *t) {
    char* end = nullptr;
    const long v = std::strtol(t, &end, 10);
    if (end == t || *end != '\0' || v <= 0) fail(ErrorCode::ConfigError, "LOWKEY_TTL_SECONDS must be a positive integer");
    base.ttl = std::chrono::seconds(v);
  }
  return base;
}

std::string to_string(JobState s) {
  switch (s) {
    case JobState::Queued: return "queued";
    case JobState::Running: return "running";
    case JobState::Done: return "done";
    case JobState::Failed: return "failed";
  }
  return "failed";
}

std::string status_to_json(const JobStatus& s) {
  json j{{"job_id", s.id}, {"state", to_string(s.state)}, {"preset", s.preset}, {"width", s.width}, {"height", s.height}};
  if (s.state == JobState::Done) {
    j["per_model_displacement"] = s.per_model_displacement;
    j["lpips_cost"] = s.lpips_cost;
    j["faces_attacked"] = s.faces_attacked;
    j["objective_trace"] = s.objective_trace;
  }
  if (s.state == JobState::Failed) j["error"] = {{"code", s.error_code}, {"message", s.error_message}};
  return j.dump();
}

namespace {

std::string random_hex(std::mt19937_64& rng) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  for (int i = 0; i < 2; ++i) {
    std::uint64_t v = rng();
    for (int k = 0; k < 16; ++k, v >>= 4) out.push_back(digits[v & 15]);
  }
  return out;
}

void write_file(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  std::filesystem::create_directories(p.parent_path());
  imaging::write_bytes(p, bytes);
}

}  // namespace

std::vector<attack::Preset> JobService::presets() {
  return {attack::Preset::Small, attack::Preset::Standard, attack::Preset::Large};
}

JobService::JobService(ServiceConfig cfg, Protector protector) : cfg_(std::move(cfg)), protector_(std::move(protector)) {
  if (cfg_.workers < 1) fail(ErrorCode::ConfigError, "service needs at least one worker");
  if (cfg_.ttl.count() <= 0) fail(ErrorCode::ConfigError, "TTL must be positive");
  std::filesystem::create_directories(cfg_.storage);
  for (int i = 0; i < cfg_.workers; ++i) workers_.emplace_back([this] { worker_loop(); });
  sweeper_ = std::thread([this] { sweeper_loop(); });
}

JobService::~JobService() {
  {
    std::lock_guard lock(mu_);
    stopping_ = true;
  }
  cv_.notify_all();
  sweep_cv_.notify_all();
  for (auto& t : workers_) t.join();
  sweeper_.join();
}

std::optional<std::string> JobService::submit(const std::vector<std::uint8_t>& bytes, const std::string& preset,
                                              const std::string& client) {
  const attack::Preset p = attack::preset_from_string(preset);
  if (p == attack::Preset::Custom) fail(ErrorCode::ConfigError, "preset must be small, standard or large");
  const imaging::ImageTensor img = imaging::decode(bytes);

  std::unique_lock lock(mu_);
  int active_for_client = 0;
  for (const auto& [id, j] : jobs_)
    if (j.client == client && (j.state == JobState::Queued || j.state == JobState::Running)) ++active_for_client;
  if (active_for_client >= cfg_.per_ip_active_jobs) return std::nullopt;

  static thread_local std::mt19937_64 rng(std::random_device{}());
  const std::string id = random_hex(rng) + std::to_string(++counter_);
  JobStatus st;
  st.id = id;
  st.preset = preset;
  st.client = client;
  st.width = img.width();
  st.height = img.height();
  st.created = std::chrono::steady_clock::now();
  jobs_[id] = st;
  lock.unlock();
  write_file(cfg_.storage / id / "input.bin", bytes);
  lock.lock();
  queue_.push_back(id);
  ++active_;
  lock.unlock();
  cv_.notify_one();
  return id;
}

std::optional<JobStatus> JobService::status(const std::string& id) const {
  std::lock_guard lock(mu_);
  const auto it = jobs_.find(id);
  if (it == jobs_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::vector<std::uint8_t>> JobService::result(const std::string& id) const {
  {
    std::lock_guard lock(mu_);
    const auto it = jobs_.find(id);
    if (it == jobs_.end() || it->second.state != JobState::Done) return std::nullopt;
  }
  const auto path = cfg_.storage / id / "output.png";
  if (!std::filesystem::exists(path)) return std::nullopt;
  return imaging::read_bytes(path);
}

void JobService::worker_loop() {
  for (;;) {
    std::string id;
    std::string preset;
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
      if (stopping_) return;
      id = queue_.front();
      queue_.pop_front();
      auto& j = jobs_.at(id);
      j.state = JobState::Running;
      preset = j.preset;
    }
    JobStatus outcome;
    try {
      const auto img = imaging::decode(imaging::read_bytes(cfg_.storage / id / "input.bin"));
      auto cfg = attack::AttackConfig::from_preset(attack::preset_from_string(preset));
      cfg.seed = cfg_.seed;
      const auto r = protector_(img, cfg);
      write_file(cfg_.storage / id / "output.png", imaging::encode_png(r.protected_image));
      outcome.state = JobState::Done;
      outcome.per_model_displacement = r.per_model_displacement;
      outcome.lpips_cost = r.lpips_cost;
      outcome.faces_attacked = r.faces_attacked;
      outcome.objective_trace = r.objective_trace;
    } catch (const Error& e) {
      outcome.state = JobState::Failed;
      outcome.error_code = std::string(e.code_name());
      outcome.error_message = e.what();
    } catch (const std::exception& e) {
      outcome.state = JobState::Failed;
      outcome.error_code = "InternalError";
      outcome.error_message = e.what();
    }
    {
      std::lock_guard lock(mu_);
      if (auto it = jobs_.find(id); it != jobs_.end()) {
        auto& j = it->second;
        j.state = outcome.state;
        j.error_code = outcome.error_code;
        j.error_message = outcome.error_message;
        j.per_model_displacement = outcome.per_model_displacement;
        j.lpips_cost = outcome.lpips_cost;
        j.faces_attacked = outcome.faces_attacked;
        j.objective_trace = outcome.objective_trace;
      }
      --active_;
    }
    idle_cv_.notify_all();
  }
}

std::size_t JobService::sweep_expired(std::chrono::steady_clock::time_point now) {
  std::vector<std::string> expired;
  {
    std::lock_guard lock(mu_);
    for (auto it = jobs_.begin(); it != jobs_.end();) {
      const bool finished = it->second.state == JobState::Done || it->second.state == JobState::Failed;
      if (finished && now - it->second.created >= cfg_.ttl) {
        expired.push_back(it->first);
        it = jobs_.erase(it);
      } else {
        ++it;
      }
    }
  }
  for (const auto& id : expired) {
    std::error_code ec;
    std::filesystem::remove_all(cfg_.storage / id, ec);
  }
  return expired.size();
}

void JobService::wait_idle() {
  std::unique_lock lock(mu_);
  idle_cv_.wait(lock, [this] { return active_ == 0; });
}

void JobService::sweeper_loop() {
  const auto period = std::clamp<std::chrono::milliseconds>(
      std::chrono::duration_cast<std::chrono::milliseconds>(cfg_.ttl) / 4, std::chrono::milliseconds(100),
      std::chrono::milliseconds(30000));
  std::unique_lock lock(mu_);
  while (!stopping_) {
    sweep_cv_.wait_for(lock, period, [this] { return stopping_; });
    if (stopping_) break;
    lock.unlock();
    sweep_expired();
    lock.lock();
  }
}

// ---------------------------------------------------------------- HTTP

namespace {

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  res.status = status;
  res.set_content(json{{"error", code}, {"message", message}}.dump(), "application/json");
}

}  // namespace

HttpApi::HttpApi(JobService& jobs) : jobs_(jobs), server_(std::make_unique<httplib::Server>()) {
  auto& s = *server_;
  s.set_payload_max_length(jobs_.config().max_upload_bytes);

  s.Post("/v1/protect", [this](const httplib::Request& req, httplib::Response& res) {
    if (!req.has_file("image")) return send_error(res, 400, "DecodeError", "multipart field 'image' is required");
    const auto& file = req.get_file_value("image");
    std::string preset = "standard";
    if (req.has_file("preset"))
      preset = req.get_file_value("preset").content;
    else if (req.has_param("preset"))
      preset = req.get_param_value("preset");
    try {
      const std::vector<std::uint8_t> bytes(file.content.begin(), file.content.end());
      const auto id = jobs_.submit(bytes, preset, req.remote_addr);
      if (!id) return send_error(res, 429, "TooManyJobs", "too many active jobs for this client");
      res.status = 202;
      res.set_content(json{{"job_id", *id}}.dump(), "application/json");
    } catch (const Error& e) {
      send_error(res, 400, std::string(e.code_name()), e.what());
    }
  });

  s.Get(R"(/v1/jobs/([A-Za-z0-9]+))", [this](const httplib::Request& req, httplib::Response& res) {
    const auto st = jobs_.status(req.matches[1]);
    if (!st) return send_error(res, 404, "NotFound", "unknown job id");
    res.set_content(status_to_json(*st), "application/json");
  });

  s.Get(R"(/v1/jobs/([A-Za-z0-9]+)/result)", [this](const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    const auto st = jobs_.status(id);
    if (!st) return send_error(res, 404, "NotFound", "unknown job id");
    if (st->state == JobState::Failed) return send_error(res, 409, st->error_code, st->error_message);
    if (st->state != JobState::Done) return send_error(res, 409, "NotReady", "job is " + to_string(st->state));
    const auto bytes = jobs_.result(id);
    if (!bytes) return send_error(res, 404, "NotFound", "result expired");
    res.set_content(std::string(bytes->begin(), bytes->end()), "image/png");
  });

  s.Get("/v1/presets", [](const httplib::Request&, httplib::Response& res) {
    json list = json::array();
    for (auto p : JobService::presets()) {
      const auto c = attack::AttackConfig::from_preset(p);
      list.push_back({{"name", attack::to_string(p)}, {"alpha", c.alpha}, {"steps", c.steps}, {"step_size", c.step_size}});
    }
    res.set_content(json{{"presets", list}, {"default", "standard"}}.dump(), "application/json");
  });
}

HttpApi::~HttpApi() { stop(); }

bool HttpApi::listen(const std::string& host, int port) { return server_->listen(host, port); }

int HttpApi::start_background(const std::string& host) {
  const int port = server_->bind_to_any_port(host);
  if (port < 0) fail(ErrorCode::IoError, "cannot bind " + host);
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return port;
}

void HttpApi::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace lowkey::service
