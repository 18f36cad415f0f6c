#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <optional>

#include "ncdsfl/config.hpp"
#include "ncdsfl/errors.hpp"

namespace fs = std::filesystem;
using namespace ncdsfl;

namespace {

struct Options {
  std::string config;
  std::string profile;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::string out;
};

cli::ExperimentConfig resolve(const Options& o) {
  nlohmann::json j = nlohmann::json::object();
  if (!o.config.empty()) {
    std::ifstream f(o.config);
    if (!f) throw ConfigError("cannot read config " + o.config);
    try {
      j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("config parse error: ") + e.what());
    }
  }
  if (!o.profile.empty()) j["profile"] = o.profile;
  if (o.seed) j["seed"] = *o.seed;
  if (o.jobs) j["jobs"] = *o.jobs;
  return cli::from_json(j);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated deep-supervised OFDM detection experiments"};
  app.require_subcommand(1);
  Options o;

  using Command = int (*)(const cli::ExperimentConfig&, const fs::path&, std::ostream&);
  const std::vector<std::tuple<std::string, std::string, Command>> commands{
      {"nc-validate", "Check the collapse theory numerically", cli::cmd_nc_validate},
      {"train", "Train one algorithm and record convergence", cli::cmd_train},
      {"sweep", "Run an SNR / Rician / heterogeneity sweep", cli::cmd_sweep},
      {"gen-data", "Export channel pools and validation samples", cli::cmd_gen_data},
  };
  std::vector<CLI::App*> subs;
  for (const auto& [name, help, fn] : commands) {
    CLI::App* s = app.add_subcommand(name, help);
    s->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
    s->add_option("--profile", o.profile, "Base profile")->check(CLI::IsMember({"paper-full", "paper-small"}));
    s->add_option("--seed", o.seed, "Master seed");
    s->add_option("--jobs", o.jobs, "Worker threads")->check(CLI::PositiveNumber);
    s->add_option("--out", o.out, "Output directory");
    subs.push_back(s);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? cli::kExitOk : cli::kExitConfigError;
  }

  for (std::size_t i = 0; i < subs.size(); ++i) {
    if (!subs[i]->parsed()) continue;
    const auto& [name, help, fn] = commands[i];
    const fs::path out = o.out.empty() ? fs::path("out") / name : fs::path(o.out);
    try {
      return fn(resolve(o), out, std::cerr);
    } catch (const ConfigError& e) {
      std::cerr << "config error: " << e.what() << '\n';
      return cli::kExitConfigError;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << '\n';
      return cli::kExitRunFailure;
    }
  }
  return cli::kExitConfigError;
}
