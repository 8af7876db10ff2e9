#include <iostream>

#include "mvapad/cli.hpp"

int main(int argc, char** argv) { return mvapad::run_cli(argc, argv, std::cout, std::cerr); }
