#include "focalconv/cli.hpp"

int main(int argc, char** argv) {
    return focalconv::cli::run(argc, argv);
}
