#include "ramseg/cli.hpp"

int main(int argc, char** argv) { return ramseg::cli_main(argc, argv); }
