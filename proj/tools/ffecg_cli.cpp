#include "ffecg/cli.hpp"

int main(int argc, char** argv) {
  return ffecg::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
