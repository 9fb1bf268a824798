#include "sftlab/cli.hpp"

int main(int argc, char** argv) { return sftlab::run_cli(argc, argv); }
