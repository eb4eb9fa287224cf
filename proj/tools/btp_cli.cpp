#include <iostream>
#include <string>
#include <vector>

#include "btp_commands.hpp"

int main(int argc, char **argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return btp::cli::run(args, std::cout, std::cerr);
}
