#include "saevit/cli.hpp"

int main(int argc, char** argv) { return saevit::cli_run(argc, argv); }
