#include "camoforge/clirun.hpp"

int main(int argc, char** argv) { return camoforge::cli::run_cli(argc, argv); }
