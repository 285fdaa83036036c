#include <cstdio>
int main() { std::puts("semdn: placeholder"); return 0; }
