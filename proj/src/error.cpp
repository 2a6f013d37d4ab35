#include "bfx/error.hpp"

namespace bfx {
namespace {

std::string join_problems(const std::vector<std::string>& problems) {
  std::string out = "configuration invalid:";
  for (const auto& p : problems) out += "\n  - " + p;
  return out;
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error(join_problems(problems)), problems_(std::move(problems)) {}

}  // namespace bfx
