#include "casdiff/cli.hpp"

int main(int argc, char** argv) { return casdiff::run_cli(argc, argv); }
