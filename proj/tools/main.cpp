#include <string>
#include <vector>

#include "dtu/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return dtu::dispatch(args);
}
