#include "cli.hpp"

int main(int argc, char** argv) { return quad::cli::RunCli(argc, argv); }
