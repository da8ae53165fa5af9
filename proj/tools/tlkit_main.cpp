#include <cstdio>

int main() {
    std::puts("tlkit: placeholder");
    return 0;
}
