#include "octseg/cli.hpp"

int main(int argc, char** argv) { return octseg::cli::run(argc, argv); }
