#include "calldet/cli.hpp"

int main(int argc, char** argv) {
  return calldet::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
