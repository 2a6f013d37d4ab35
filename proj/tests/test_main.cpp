#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "bfx/log.hpp"

int main(int argc, char** argv) {
  bfx::set_log_level("error");
  doctest::Context context(argc, argv);
  return context.run();
}
