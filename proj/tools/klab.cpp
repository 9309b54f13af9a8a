#include "klab/cli.hpp"

int main(int argc, char** argv) { return klab::cli::main_impl(argc, argv); }
