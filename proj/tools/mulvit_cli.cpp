#include <iostream>
#include <string>
#include <vector>

#include "mulvit/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return mulvit::cli::run(args, std::cout, std::cerr);
}
