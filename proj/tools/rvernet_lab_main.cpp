#include "rvernet/commands.hpp"

int main(int argc, char** argv) { return rvernet::run_cli(argc, argv); }
