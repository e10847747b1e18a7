#include "dmtl/cli.hpp"

int main(int argc, char** argv) { return dmtl::cli::run(argc, argv); }
