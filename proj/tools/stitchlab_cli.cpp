#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "stitchlab/config.hpp"
#include "stitchlab/errors.hpp"
#include "stitchlab/pipeline.hpp"

namespace {

std::optional<std::size_t> threads_from_env() {
  const char* value = std::getenv("STITCHLAB_THREADS");
  if (!value || !*value) return std::nullopt;
  try {
    std::size_t used = 0;
    const long long n = std::stoll(value, &used);
    if (used != std::string(value).size() || n < 1) throw std::invalid_argument(value);
    return static_cast<std::size_t>(n);
  } catch (const std::exception&) {
    throw stitchlab::ConfigError("STITCHLAB_THREADS must be a positive integer, got '" + std::string(value) + "'");
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stitchlab: model-stitching laboratory (KLAS selection, baselines, evaluation)"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string method;
  std::optional<double> tau;
  std::optional<std::size_t> buckets;
  std::optional<std::size_t> threads;

  app.add_option("--config", config_path, "Experiment config (JSON); built-in defaults when omitted")
      ->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "Run seed override");
  app.add_option("--out", out, "Output root directory");
  app.add_option("--method", method, "Selection method")->check(CLI::IsMember({"klas", "snnet", "minkl"}));
  app.add_option("--tau", tau, "Relative threshold slack");
  app.add_option("--buckets", buckets, "Number of FLOPs buckets");
  app.add_option("--threads", threads, "Worker threads (fallback: STITCHLAB_THREADS)");

  for (const auto& name : stitchlab::Pipeline::stage_names()) app.add_subcommand(name, "Run the " + name + " stage");
  app.add_subcommand("default-config", "Print the built-in configuration");
  app.add_subcommand("run-dir", "Print the run directory for the configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  const std::string stage = app.get_subcommands().front()->get_name();
  try {
    if (stage == "default-config") {
      std::cout << stitchlab::dump_config(stitchlab::default_config()) << '\n';
      return 0;
    }
    stitchlab::ExperimentConfig config =
        config_path.empty() ? stitchlab::default_config() : stitchlab::load_config(config_path);
    stitchlab::RunOverrides overrides;
    overrides.seed = seed;
    if (!out.empty()) overrides.out = out;
    if (!method.empty()) overrides.method = stitchlab::plan_method_from_string(method);
    overrides.tau = tau;
    overrides.buckets = buckets;
    overrides.threads = threads ? threads : threads_from_env();
    stitchlab::Pipeline pipeline(stitchlab::apply_overrides(std::move(config), overrides));
    if (stage == "run-dir") {
      std::cout << pipeline.dir().string() << '\n';
      return 0;
    }
    pipeline.run(stage);
    std::cout << stage << ": ok (" << pipeline.dir().string() << ")\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "stitchlab " << stage << ": " << e.what() << '\n';
    return stitchlab::exit_code_for(e);
  }
}
