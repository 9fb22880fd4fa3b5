#include "solider/cli.hpp"

int main(int argc, char** argv) { return solider::cli::run(argc, argv); }
