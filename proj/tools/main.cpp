#include "gplab/cli.hpp"

int main(int argc, char** argv) { return gplab::cli::run_cli(argc, argv); }
