#include "cli/commands.hpp"

int main(int argc, char** argv) { return optimerge::cli::run_cli(argc, argv); }
