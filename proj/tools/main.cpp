#include "elastoreg/cli.hpp"

int main(int argc, char** argv) { return elastoreg::cli::run(argc, argv); }
