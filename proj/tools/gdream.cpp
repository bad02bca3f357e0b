#include "gdream/cli.hpp"

int main(int argc, char** argv) { return gdream::run(argc, argv); }
