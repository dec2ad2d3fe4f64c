#include <iostream>

#include "metadec/cli.hpp"

int main(int argc, char** argv) { return metadec::run_command(argc, argv, std::cout, std::cerr); }
