#include "hybrid/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"Run a hybrid-architecture experiment from a JSON config and write its reports."};
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  bool check_only = false;
  app.add_option("--config,config", config_path, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "override the config seed");
  app.add_option("--out", out, "override the config output_dir");
  app.add_flag("--validate", check_only, "only check the config");
  CLI11_PARSE(app, argc, argv);

  hybrid::Overrides overrides;
  overrides.seed = seed;
  if (out) overrides.output_dir = *out;
  try {
    const hybrid::Json config = hybrid::read_json(config_path);
    if (check_only) {
      const auto diags = hybrid::validate(config, overrides);
      for (const auto& d : diags) std::cerr << "config error: " << d << '\n';
      if (diags.empty()) std::cout << "config ok\n";
      return diags.empty() ? 0 : 1;
    }
    const hybrid::ReportBundle bundle = hybrid::run(config, overrides);
    std::cout << bundle.command << " (config " << bundle.config_hash << ")\n";
    for (const auto& line : bundle.summary) std::cout << "  " << line << '\n';
    for (const auto& f : bundle.files) std::cout << "  wrote " << f.string() << '\n';
    for (const auto& v : bundle.violations) std::cerr << "violation: " << v << '\n';
    return bundle.violations.empty() ? 0 : 2;
  } catch (const hybrid::ConfigError& e) {
    for (const auto& d : e.diagnostics()) std::cerr << "config error: " << d << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
