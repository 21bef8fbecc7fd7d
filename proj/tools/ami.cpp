#include <iostream>
#include <string>
#include <vector>

#include "ami/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return ami::cli::run(args, std::cout, std::cerr);
}
