#include "hsarnn/cli.hpp"

#include <iostream>

int main(int argc, char** argv) {
  return hsarnn::cli::run(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
