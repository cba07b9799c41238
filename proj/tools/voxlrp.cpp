#include <chrono>
#include <cstdio>
#include <csignal>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "voxlrp/error.hpp"
#include "voxlrp/pipeline.hpp"
#include "voxlrp/runtime.hpp"
#include "voxlrp/server.hpp"

namespace {

const char* kExitCodes =
    "Exit codes:\n"
    "   0  success\n"
    "   1  unexpected internal error\n"
    "   2  bad command line\n"
    "  10  io               11  format.bad_magic     12  format.truncated\n"
    "  13  format.dim_overflow                       14  format.trailing_bytes\n"
    "  20  schema           21  dim_mismatch         22  duplicate_id\n"
    "  30  invalid_argument 31  precondition         32  rank_deficient\n"
    "  33  shape_mismatch   40  integrity            41  not_found\n"
    "  50  undefined\n"
    "Errors are printed to stderr as one JSON line: {\"error\": code, \"exit\": n, \"message\": text}.\n";

voxlrp::HttpServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

void print_error(const std::string& code, int exit, const std::string& message) {
  std::cerr << nlohmann::json{{"error", code}, {"exit", exit}, {"message", message}}.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"voxlrp: 3D CNN training and relevance maps on volumetric cohorts"};
  app.footer(kExitCodes);
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  const std::vector<std::pair<const char*, const char*>> commands{
      {"synth", "generate the synthetic cohort"},
      {"residualize", "fit the covariate model on controls and write residual volumes"},
      {"split", "write the stratified fold assignment"},
      {"train", "train one model with one fold held out"},
      {"cv", "cross-validate over all folds"},
      {"explain", "write relevance maps for the chosen models and subjects"},
      {"metrics", "write classification, overlap, correlation and parameter reports"},
      {"serve", "serve volumes and relevance maps over HTTP (blocking)"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "JSON config file");
    sub->add_option("--seed", seed, "overrides the synth, split and train seeds");
    sub->add_option("--out", out, "output directory (overrides paths.out)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    print_error("usage", 2, e.what());
    return 2;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    voxlrp::tune_allocator();
    voxlrp::PipelineConfig cfg = config_path.empty() ? voxlrp::config_from_json(nlohmann::json::object())
                                                     : voxlrp::load_pipeline_config(config_path);
    if (seed) cfg.set_seed(*seed);
    if (!out.empty()) cfg.out = out;

    const auto t0 = std::chrono::steady_clock::now();
    nlohmann::json summary;
    if (cmd == "synth") summary = voxlrp::run_synth(cfg);
    else if (cmd == "residualize") summary = voxlrp::run_residualize(cfg);
    else if (cmd == "split") summary = voxlrp::run_split(cfg);
    else if (cmd == "train") summary = voxlrp::run_train(cfg);
    else if (cmd == "cv") summary = voxlrp::run_cv_stage(cfg);
    else if (cmd == "explain") summary = voxlrp::run_explain(cfg);
    else if (cmd == "metrics") summary = voxlrp::run_metrics(cfg);
    else if (cmd == "serve") {
      voxlrp::ApiService api(cfg.out, cfg.manifest_path());
      voxlrp::HttpServer server(api);
      const int port = server.bind(cfg.serve.host, cfg.serve.port);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << nlohmann::json{{"serving", cfg.serve.host}, {"port", port}}.dump() << std::endl;
      server.listen();
      g_server = nullptr;
      return 0;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << summary.dump() << "\n";
    std::fprintf(stderr, "%s: %.1f s\n", cmd.c_str(), secs);
    return 0;
  } catch (const voxlrp::Error& e) {
    const int code = voxlrp::exit_code(e.code());
    print_error(std::string(voxlrp::to_string(e.code())), code, e.what());
    return code;
  } catch (const std::exception& e) {
    print_error("internal", 1, e.what());
    return 1;
  }
}
