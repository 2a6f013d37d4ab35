#pragma once

// Optional extra imagery source backed by a static-map HTTP API. Nothing else
// in the pipeline depends on it.

#include <opencv2/core.hpp>

#include <chrono>
#include <stdexcept>
#include <string>

namespace bfx {

inline constexpr const char* kStaticMapKeyEnv = "STATICMAP_API_KEY";

struct StaticMapRequest {
  double lat = 0.0;
  double lon = 0.0;
  int zoom = 18;
  int size = 640;
  std::string maptype = "satellite";
};

struct StaticMapOptions {
  std::string base_url = "https://maps.googleapis.com";
  std::string path = "/maps/api/staticmap";
  int max_attempts = 3;
  std::chrono::milliseconds initial_backoff{500};
  std::chrono::seconds timeout{30};
};

/// Network or server failure after all retries.
class StaticMapError : public std::runtime_error {
 public:
  StaticMapError(const std::string& what, int status, int attempts)
      : std::runtime_error(what), status_(status), attempts_(attempts) {}
  int status() const noexcept { return status_; }
  int attempts() const noexcept { return attempts_; }

 private:
  int status_;
  int attempts_;
};

/// Reads the API key from STATICMAP_API_KEY; throws ConfigError before any
/// network traffic when it is unset or empty.
std::string static_map_key_from_env();

/// Fetches and decodes one RGB tile of `size` x `size` pixels. 5xx responses
/// and transport errors are retried with exponential backoff; 4xx responses
/// (quota, bad key) fail immediately with the server body verbatim.
cv::Mat fetch_static_map(const StaticMapRequest& request, const std::string& api_key,
                         const StaticMapOptions& options = {});

/// Same, with the key taken from the environment.
cv::Mat fetch_static_map(const StaticMapRequest& request, const StaticMapOptions& options = {});

}  // namespace bfx
