#include <iostream>

#include "loupe_cli/cli.hpp"

int main(int argc, char** argv) { return loupe::cli::run(argc, argv, std::cout, std::cerr); }
