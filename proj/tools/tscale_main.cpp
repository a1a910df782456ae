#include <iostream>
#include <string>
#include <vector>

#include "tscale/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return tscale::run_cli(args, std::cout, std::cerr);
}
