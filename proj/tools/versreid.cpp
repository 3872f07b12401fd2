#include "versreid/cli.hpp"

int main(int argc, char** argv) { return versreid::cli_main(argc, argv); }
