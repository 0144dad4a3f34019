#include <string>
#include <vector>

#include "smoothnet/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return smoothnet::run_cli(std::move(args));
}
