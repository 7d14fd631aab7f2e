#include "revid/cli.hpp"

#include <cstdlib>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>
#include <tbb/global_control.h>

#include "revid/pipeline.hpp"

namespace revid {

namespace {

int resolve_threads(std::optional<int> flag, int from_config) {
  if (flag) return *flag;
  if (from_config > 0) return from_config;
  if (const char* env = std::getenv("REVID_THREADS")) {
    try {
      int n = std::stoi(env);
      if (n < 0) throw std::invalid_argument("negative");
      return n;
    } catch (const std::exception&) {
      throw ConfigError(fmt::format("REVID_THREADS: expected a nonnegative integer, got '{}'", env));
    }
  }
  return 0;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Simulation and identification of production functions, markups and demand from revenue panels"};
  app.set_version_flag("--version", library_version());
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, out;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  bool verbose = false, quiet = false;
  app.add_option("-c,--config", config_path, "TOML or JSON config file")->check(CLI::ExistingFile);
  app.add_option("--out", out, "results directory (overrides io.out)");
  app.add_option("--seed", seed, "master seed (overrides io.seed)");
  app.add_option("--threads", threads, "worker threads, 0 = all (overrides io.threads and REVID_THREADS)")
      ->check(CLI::NonNegativeNumber);
  app.add_flag("-v,--verbose", verbose, "log progress");
  app.add_flag("-q,--quiet", quiet, "log errors only");

  const std::pair<const char*, const char*> subs[] = {
      {"simulate", "simulate a firm panel with latent truth columns"},
      {"identify", "identify control function, production function, markups and productivity"},
      {"normalize", "identify, then fix scale and location across periods"},
      {"demand", "build the demand system and evaluate counterfactual queries"},
      {"montecarlo", "replicate simulate + identify and summarize recovery errors"},
      {"report", "tabulate a results directory"}};
  std::string report_dir, compare_dir;
  for (auto [name, desc] : subs) {
    auto* sc = app.add_subcommand(name, desc);
    if (std::string(name) == "report") {
      sc->add_option("dir", report_dir, "results directory (default: io.out)");
      sc->add_option("--compare", compare_dir, "second results directory for a side-by-side table");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  spdlog::set_level(quiet ? spdlog::level::err : verbose ? spdlog::level::info : spdlog::level::warn);
  try {
    RunConfig cfg = config_path.empty() ? parse_config(nlohmann::json::object()) : load_config(config_path);
    cfg.mode = parse_mode(app.get_subcommands().front()->get_name());
    if (!out.empty()) cfg.io.out = out;
    if (seed) cfg.io.seed = *seed;
    if (!report_dir.empty()) cfg.io.out = report_dir;
    if (!compare_dir.empty()) cfg.io.compare = compare_dir;
    cfg.io.threads = resolve_threads(threads, cfg.io.threads);

    std::unique_ptr<tbb::global_control> limit;
    if (cfg.io.threads > 0)
      limit = std::make_unique<tbb::global_control>(tbb::global_control::max_allowed_parallelism,
                                                    static_cast<std::size_t>(cfg.io.threads));
    auto summary = run(cfg);
    if (cfg.mode == Mode::Report)
      std::cout << summary["text"].get<std::string>();
    else
      std::cout << fmt::format("{}: results written to {}\n", to_string(cfg.mode), cfg.io.out);
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace revid
