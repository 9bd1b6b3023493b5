#include "xunc/cli.hpp"

int main(int argc, char** argv) { return xunc::cli::run_cli(argc, argv); }
