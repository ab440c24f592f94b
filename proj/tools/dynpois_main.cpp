// Apache License, Version 2.0, refer to LICENSE.txt

#include "dynpois/cli.hpp"

#include <iostream>

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  const dynpois::CommandResult r = dynpois::run_command(args);
  if (r.exit_code != 0) std::cerr << r.error_json << '\n';
  return r.exit_code;
}
