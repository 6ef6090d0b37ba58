#include "actnet/cli.hpp"

int main(int argc, char** argv) { return actnet::cli::run(argc, argv); }
