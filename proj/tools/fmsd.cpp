#include "fmsd/cli/run.hpp"

int main(int argc, char** argv) { return fmsd::cli::run(argc, argv); }
