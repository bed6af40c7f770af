#include <span>

#include "hmtl/cli.hpp"

int main(int argc, char** argv) {
    return hmtl::cli::run_cli(std::span<const char* const>(argv, static_cast<std::size_t>(argc)));
}
