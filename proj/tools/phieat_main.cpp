#include <string>
#include <vector>

#include "phieat/cli/cli.hpp"

int main(int argc, char** argv) {
  return phieat::cli::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
