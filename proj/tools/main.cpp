#include "subseg/cli.hpp"

int main(int argc, char** argv) { return subseg::run_cli(argc, argv); }
