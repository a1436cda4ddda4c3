#include <iostream>
int main() { std::cout << "deco: subcommands pending\n"; return 0; }
