#include <iostream>

#include "pera_cli/cli.hpp"

int main(int argc, char** argv) {
  return pera::cli::dispatch(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
