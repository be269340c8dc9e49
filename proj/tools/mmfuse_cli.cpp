#include "mmfuse/cli.hpp"

int main(int argc, char** argv) { return mmfuse::cli::run(argc, argv); }
