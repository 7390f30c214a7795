#include <iostream>

#include "attnorm/cli.hpp"
#include "attnorm/common.hpp"

int main(int argc, char** argv) {
  attnorm::retain_heap_memory();
  return attnorm::run_cli(argc, argv, std::cout, std::cerr);
}
