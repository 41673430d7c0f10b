#include <iostream>
#include <string>
#include <vector>

#include "kpt/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return kpt::run_cli(args, std::cout, std::cerr);
}
