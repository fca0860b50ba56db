#include "candtrack/cli.hpp"

int main(int argc, char** argv) { return candtrack::run_cli(argc, argv); }
