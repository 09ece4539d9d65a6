#include "diffpath/cli.hpp"

int main(int argc, char** argv) { return diffpath::dispatch(argc, argv); }
