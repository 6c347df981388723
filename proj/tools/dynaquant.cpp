#include <iostream>

#include "dynaquant/cli.hpp"

int main(int argc, char** argv) { return dynaquant::run_cli(argc, argv, std::cout, std::cerr); }
