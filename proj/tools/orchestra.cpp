#include "orchestra/cli.hpp"

int main(int argc, char** argv) { return orchestra::cli_main(argc, argv); }
