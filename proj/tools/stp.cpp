#include "stp/commands.hpp"

int main(int argc, char** argv) { return stp::run_cli(argc, argv); }
