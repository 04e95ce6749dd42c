#include "maskflow/cli.hpp"

int main(int argc, char** argv) { return maskflow::cli::run_cli(argc, argv); }
