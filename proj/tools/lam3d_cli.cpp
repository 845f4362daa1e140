#include <iostream>

#include "lam3d/commands.hpp"

int main(int argc, char** argv) {
    return lam3d::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
