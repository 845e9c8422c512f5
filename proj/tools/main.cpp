#include <tocnmpc/model.hpp>

#include <iostream>

int main() {
    std::cout << "toc_nmpc: CLI not wired up yet\n";
    return 1;
}
