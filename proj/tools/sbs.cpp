// Licensed under the Apache License, Version 2.0

#include <iostream>
#include <string>
#include <vector>

#include "cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return sbs::cli::dispatch(args, std::cout, std::cerr);
}
