#include <iostream>

#include "pdraft/cli.hpp"
#include "pdraft/runtime.hpp"

int main(int argc, char** argv) {
  pdraft::configure_allocator();
  return pdraft::run_cli(argc, argv, std::cout, std::cerr);
}
