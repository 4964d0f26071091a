#include <iostream>

#include "amess/cli.hpp"

int main(int argc, char** argv) { return amess::cli_main(argc, argv, std::cout, std::cerr); }
