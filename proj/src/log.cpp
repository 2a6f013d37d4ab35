#include "bfx/log.hpp"

#include <spdlog/spdlog.h>

#include "bfx/error.hpp"

namespace bfx {

void log_info(const std::string& message) { spdlog::info("{}", message); }
void log_warn(const std::string& message) { spdlog::warn("{}", message); }
void log_error(const std::string& message) { spdlog::error("{}", message); }

void set_log_level(const std::string& level) {
  const auto parsed = spdlog::level::from_str(level);
  if (parsed == spdlog::level::off && level != "off") throw InvalidArgument("unknown log level '" + level + "'");
  spdlog::set_level(parsed);
}

}  // namespace bfx
