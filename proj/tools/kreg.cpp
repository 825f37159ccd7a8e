#include "kreg/cli.hpp"

int main(int argc, char** argv) { return kreg::run_cli(argc, argv); }
