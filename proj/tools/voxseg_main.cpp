#include <iostream>

#include "voxseg/cli.hpp"

int main(int argc, char** argv) {
  return voxseg::cli::run_cli(argc, argv, std::cout, std::cerr);
}
