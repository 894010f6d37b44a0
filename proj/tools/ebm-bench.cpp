// Command-line driver: data generation, training, evaluation, benchmark
// sweeps, and plotting. Subcommands are filled in as the library lands.
#include <cstdio>

int main(int argc, char** argv) {
  (void)argc;
  (void)argv;
  std::fprintf(stderr, "ebm-bench: not wired up yet\n");
  return 2;
}
