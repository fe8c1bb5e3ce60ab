#include <iostream>

#include "seqchat/cli.hpp"

int main(int argc, char** argv) { return seqchat::run_cli(argc, argv, std::cout, std::cerr, std::cin); }
