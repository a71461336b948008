// SPDX-License-Identifier: Apache-2.0

#include "maskrdt/commands.hpp"

#include <iostream>
#include <string>
#include <vector>

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return maskrdt::cli_main(args, std::cout, std::cerr);
}
