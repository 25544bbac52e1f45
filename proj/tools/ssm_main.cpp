#include <iostream>

#include "ssm/cli.hpp"

int main(int argc, char** argv) {
  return ssm::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
