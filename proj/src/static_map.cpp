#include "bfx/static_map.hpp"

#include <httplib.h>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <sstream>
#include <thread>

#include "bfx/error.hpp"

namespace bfx {

std::string static_map_key_from_env() {
  const char* key = std::getenv(kStaticMapKeyEnv);
  if (key == nullptr || *key == '\0') {
    throw ConfigError(std::string("static map API key missing: set ") + kStaticMapKeyEnv);
  }
  return key;
}

cv::Mat fetch_static_map(const StaticMapRequest& request, const std::string& api_key,
                         const StaticMapOptions& options) {
  if (api_key.empty()) throw ConfigError(std::string("static map API key missing: set ") + kStaticMapKeyEnv);
  if (request.size < 1 || request.size > 2048) throw InvalidArgument("static map size must lie in [1, 2048]");
  if (options.max_attempts < 1) throw InvalidArgument("max_attempts must be >= 1");

  httplib::Client client(options.base_url);
  client.set_connection_timeout(options.timeout);
  client.set_read_timeout(options.timeout);

  std::ostringstream query;
  query.precision(10);
  query << options.path << "?center=" << request.lat << ',' << request.lon << "&zoom=" << request.zoom
        << "&size=" << request.size << 'x' << request.size << "&maptype=" << request.maptype
        << "&format=png&key=" << api_key;
  const auto url = query.str();

  auto backoff = options.initial_backoff;
  int last_status = 0;
  std::string last_error;
  for (int attempt = 1; attempt <= options.max_attempts; ++attempt) {
    auto res = client.Get(url);
    if (res) {
      last_status = res->status;
      if (res->status == 200) {
        std::vector<std::uint8_t> body(res->body.begin(), res->body.end());
        cv::Mat bgr = cv::imdecode(body, cv::IMREAD_COLOR);
        if (bgr.empty()) throw StaticMapError("static map response is not a decodable image", 200, attempt);
        if (bgr.rows != request.size || bgr.cols != request.size) {
          throw StaticMapError("static map returned " + std::to_string(bgr.cols) + "x" +
                                   std::to_string(bgr.rows) + ", expected " + std::to_string(request.size),
                               200, attempt);
        }
        cv::Mat rgb;
        cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
        return rgb;
      }
      if (res->status >= 400 && res->status < 500) {
        // Quota and authorization errors: surface the server's message as is.
        throw StaticMapError(res->body, res->status, attempt);
      }
      last_error = "HTTP " + std::to_string(res->status);
    } else {
      last_error = httplib::to_string(res.error());
    }
    if (attempt < options.max_attempts) {
      spdlog::warn("static map attempt {} failed ({}); retrying in {} ms", attempt, last_error, backoff.count());
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
  }
  throw StaticMapError("static map request failed after " + std::to_string(options.max_attempts) +
                           " attempts: " + last_error,
                       last_status, options.max_attempts);
}

cv::Mat fetch_static_map(const StaticMapRequest& request, const StaticMapOptions& options) {
  return fetch_static_map(request, static_map_key_from_env(), options);
}

}  // namespace bfx
