#include "msinet/cli.hpp"

int main(int argc, char** argv) { return msinet::run_cli(argc, argv); }
