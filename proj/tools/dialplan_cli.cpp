#include "dialplan/cli.hpp"

#include <csignal>

namespace {

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop.store(true); }

}  // namespace

int main(int argc, char** argv) {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  dialplan::cli::Context ctx;
  ctx.stop = &g_stop;
  return dialplan::cli::run_command(std::vector<std::string>(argv + 1, argv + argc), ctx);
}
