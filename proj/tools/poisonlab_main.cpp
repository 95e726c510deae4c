#include <string>
#include <vector>

#include "poisonlab/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return poisonlab::dispatch(args);
}
