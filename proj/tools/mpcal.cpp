#include "mpcal/cli.hpp"

int main(int argc, char** argv) { return mpcal::cli::run(argc, argv); }
