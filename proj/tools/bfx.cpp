#include "bfx/cli.hpp"

int main(int argc, char** argv) { return bfx::run_cli(argc, argv); }
