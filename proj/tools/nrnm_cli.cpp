#include "nrnm/harness.hpp"

int main(int argc, char** argv) { return nrnm::run_cli(argc, argv); }
