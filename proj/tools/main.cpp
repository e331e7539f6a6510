#include <iostream>

#include "scriptgen/cli.hpp"

int main(int argc, char** argv) {
  return scriptgen::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
