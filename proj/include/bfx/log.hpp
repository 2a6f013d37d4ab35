#pragma once

// Thin logging facade. Translation units that include torch cannot include
// spdlog (torch bundles a different fmt), so they log through these.

#include <string>

namespace bfx {

void log_info(const std::string& message);
void log_warn(const std::string& message);
void log_error(const std::string& message);
/// "debug", "info", "warn", "error" or "off".
void set_log_level(const std::string& level);

}  // namespace bfx
