#include "revid/cli.hpp"

int main(int argc, char** argv) { return revid::run_cli(argc, argv); }
