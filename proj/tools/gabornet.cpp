#include "gabornet/cli.hpp"

int main(int argc, char** argv) { return gabornet::run_cli(argc, argv); }
