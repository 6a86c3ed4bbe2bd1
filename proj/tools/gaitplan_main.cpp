#include "gaitplan/cli.hpp"

int main(int argc, char** argv) { return gaitplan::cli::main_entry(argc, argv); }
