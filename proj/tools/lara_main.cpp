#include <cstdio>

int main() {
  std::puts("lara: subcommands not wired yet");
  return 1;
}
