#include <iostream>

#include "mma/cli.hpp"

int main(int argc, char** argv) { return mma::run_cli(argc, argv, std::cout, std::cerr); }
