#include "motionssm/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return motionssm::run_cli(argc, argv, std::cout, std::cerr); }
