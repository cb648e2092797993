#include "cdr/cli.hpp"

int main(int argc, char** argv) { return cdr::dispatch(argc, argv); }
