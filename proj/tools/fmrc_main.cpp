#include "fmrc/cli.hpp"

int main(int argc, char** argv) { return fmrc::cli::run(argc, argv); }
