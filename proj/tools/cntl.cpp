#include "cntl/cli.hpp"
#include "cntl/runtime.hpp"

int main(int argc, char** argv) {
  cntl::tune_allocator();
  return cntl::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
