#include <iostream>

#include "casecohort/cli.hpp"

int main(int argc, char** argv) {
  return casecohort::run_cli(argc, argv, std::cout, std::cerr);
}
