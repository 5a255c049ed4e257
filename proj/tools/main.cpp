#include "elf/cli.hpp"

int main(int argc, char** argv) { return elf::run_cli(argc, argv); }
