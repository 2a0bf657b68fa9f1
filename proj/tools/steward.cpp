#include <iostream>

#include "steward/service.hpp"

int main(int argc, char** argv) {
  steward::install_interrupt_handlers();
  return steward::run_cli(argc, argv, std::cin, std::cout, std::cerr);
}
