#include <iostream>

#include "marvis/cli.hpp"

int main(int argc, char** argv) {
  return marvis::dispatch(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
