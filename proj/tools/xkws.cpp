// SPDX-License-Identifier: Apache-2.0
#include "xkws/harness.hpp"

#include <iostream>

int main(int argc, char** argv) {
  return xkws::harness::run_command(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
