#include <iostream>

#include "iimt/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return iimt::run_cli(args, std::cout, std::cerr);
}
