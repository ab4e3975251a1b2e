#include "knotcast/cli.hpp"

int main(int argc, char** argv) {
  return knotcast::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
