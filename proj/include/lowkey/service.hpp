#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "lowkey/attack.hpp"

namespace httplib {
class Server;
}

namespace lowkey::service {

struct ServiceConfig {
  std::filesystem::path storage = "lowkey-storage";
  std::chrono::seconds ttl{3600};
  int workers = 1;
  std::size_t max_upload_bytes = 20u * 1024 * 1024;
  int per_ip_active_jobs = 8;
  std::uint64_t seed = 0;

  // LOWKEY_STORAGE and LOWKEY_TTL_SECONDS override the given values.
  static ServiceConfig from_env(ServiceConfig base);
  static ServiceConfig from_env() { return from_env(ServiceConfig()); }
};

enum class JobState { Queued, Running, Done, Failed };
std::string to_string(JobState s);

struct JobStatus {
  std::string id;
  JobState state = JobState::Queued;
  std::string preset;
  std::string client;
  int width = 0;
  int height = 0;
  std::string error_code;
  std::string error_message;
  std::map<std::string, double> per_model_displacement;
  double lpips_cost = 0;
  int faces_attacked = 0;
  std::vector<double> objective_trace;
  std::chrono::steady_clock::time_point created;
};

std::string status_to_json(const JobStatus& s);

using Protector = std::function<attack::ProtectionResult(const imaging::ImageTensor&, const attack::AttackConfig&)>;

// Job queue with a fixed worker pool. Uploaded originals and outputs live
// under storage/<job id>/ and are removed once older than the TTL.
class JobService {
 public:
  JobService(ServiceConfig cfg, Protector protector);
  ~JobService();
  JobService(const JobService&) = delete;
  JobService& operator=(const JobService&) = delete;

  // Throws DecodeError on bytes that are neither PNG nor JPEG, ConfigError
  // on an unknown preset. Returns nullopt when the client is over its cap.
  std::optional<std::string> submit(const std::vector<std::uint8_t>& bytes, const std::string& preset,
                                    const std::string& client = "local");

  std::optional<JobStatus> status(const std::string& id) const;
  // Encoded PNG of a finished job.
  std::optional<std::vector<std::uint8_t>> result(const std::string& id) const;

  // Deletes jobs (records and files) older than the TTL at `now`.
  std::size_t sweep_expired(std::chrono::steady_clock::time_point now = std::chrono::steady_clock::now());
  // Blocks until no job is queued or running.
  void wait_idle();

  const ServiceConfig& config() const noexcept { return cfg_; }
  static std::vector<attack::Preset> presets();

 private:
  void worker_loop();
  void sweeper_loop();

  ServiceConfig cfg_;
  Protector protector_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable idle_cv_;
  std::condition_variable sweep_cv_;
  std::deque<std::string> queue_;
  std::map<std::string, JobStatus> jobs_;
  int active_ = 0;
  std::uint64_t counter_ = 0;
  bool stopping_ = false;
  std::vector<std::thread> workers_;
  std::thread sweeper_;
};

// Binds the /v1 endpoints of `jobs` onto an httplib server.
class HttpApi {
 public:
  explicit HttpApi(JobService& jobs);
  ~HttpApi();

  // Blocking.
  bool listen(const std::string& host, int port);
  // Binds an ephemeral port and serves on a background thread; returns the port.
  int start_background(const std::string& host = "127.0.0.1");
  void stop();

 private:
  JobService& jobs_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
};

}  // namespace lowkey::service
