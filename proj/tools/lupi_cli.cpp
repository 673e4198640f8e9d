/// Command-line front end: generate, ingest, sweep, compare, report.
#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "lupi/experiment.hpp"

namespace {

std::filesystem::path runs_root(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv(lupi::kRunsRootEnv)) return env;
  return "runs";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Learning using privileged information: experiment pipeline"};
  app.require_subcommand(0, 1);
  bool print_schema = false;
  app.add_flag("--print-schema", print_schema, "print the config schema as JSON and exit");

  std::string config, out, dir, profile, dimension = "arousal", root_flag, report_file;
  bool overwrite = false, resume = false;

  auto* generate = app.add_subcommand("generate", "write a synthetic corpus");
  generate->add_option("-c,--config", config, "generator config (JSON)")->required();
  generate->add_option("-o,--out", out, "output corpus directory")->required();
  generate->add_flag("--overwrite", overwrite, "replace a non-empty output directory");

  auto* ingest = app.add_subcommand("ingest", "validate a corpus directory");
  ingest->add_option("dir", dir, "corpus directory")->required();
  ingest->add_option("--profile", profile, "reference modality table: recola | sewa");
  ingest->add_option("--dimension", dimension, "annotation target: arousal | valence");
  ingest->add_option("--report", report_file, "write the validation report as JSON");

  const auto add_run_options = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", config, "experiment config (JSON)")->required();
    cmd->add_option("--runs-root", root_flag, std::string("results root (default $") + lupi::kRunsRootEnv + " or ./runs)");
    cmd->add_flag("--resume", resume, "skip runs whose result.json matches the current hashes");
  };
  auto* sweep = app.add_subcommand("sweep", "alpha sweep over teachers and window lengths");
  add_run_options(sweep);
  auto* compare = app.add_subcommand("compare", "repeated CV of all models at the best alpha");
  add_run_options(compare);
  auto* report = app.add_subcommand("report", "CSV tables and SVG plots from existing results");
  report->add_option("dir", dir, "experiment directory (<runs root>/<name>)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : lupi::kExitConfig;
  }

  try {
    if (print_schema) {
      std::cout << lupi::config_schema().dump(2) << "\n";
      return lupi::kExitOk;
    }
    if (*generate) {
      const auto hash = lupi::cmd_generate(lupi::load_generator_config(config), out, overwrite);
      std::cout << "corpus " << out << " hash " << lupi::hex_digest(hash) << "\n";
      return lupi::kExitOk;
    }
    if (*ingest) {
      const auto r = lupi::cmd_ingest(dir, profile, dimension);
      for (const auto& s : r.sessions) {
        std::cout << (s.ok ? "ok   " : "FAIL ") << s.directory << "\n";
        for (const auto& p : s.problems) std::cout << "     " << p << "\n";
      }
      if (!report_file.empty()) lupi::detail::write_text(report_file, lupi::to_json(r).dump(2) + "\n");
      return r.ok() ? lupi::kExitOk : lupi::kExitConfig;
    }
    if (*sweep) return lupi::cmd_sweep(lupi::load_experiment_config(config), runs_root(root_flag), resume).exit_code;
    if (*compare) return lupi::cmd_compare(lupi::load_experiment_config(config), runs_root(root_flag), resume).exit_code;
    if (*report) {
      const auto r = lupi::cmd_report(dir);
      for (const auto& f : r.files) std::cout << f.string() << "\n";
      return lupi::kExitOk;
    }
    std::cout << app.help();
    return lupi::kExitOk;
  } catch (const lupi::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return lupi::kExitConfig;
  } catch (const lupi::CorpusFormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return lupi::kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
