#include "iternet/cli.hpp"

int main(int argc, char** argv) { return iternet::run_cli(argc, argv); }
