// Regenerates the golden trajectory files used by the environment tests.
#include <CLI11.hpp>

#include <iostream>

#include "adaptrl/golden.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Write golden environment trajectories"};
  std::string out = "tests/golden";
  std::vector<std::uint64_t> seeds{1, 7};
  app.add_option("--out", out, "Output directory");
  app.add_option("--seeds", seeds, "Seeds to record");
  CLI11_PARSE(app, argc, argv);
  using namespace adaptrl;
  for (GameId g : {GameId::MiniPong, GameId::MiniBreakout, GameId::MiniCourt}) {
    for (std::uint64_t s : seeds) {
      const auto path = golden_path(out, g, s);
      write_file_atomic(path, encode_golden(golden_trajectory(g, s)));
      std::cout << path.string() << "\n";
    }
  }
  return 0;
}
