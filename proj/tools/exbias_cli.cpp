// exbias command line: run experiments, check gradients, solve the
// overexposure probability, validate configs.

#include <cstdio>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "exbias/harness.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

exbias::ExperimentConfig load_config(const std::string& path) {
  exbias::json doc;
  try {
    doc = exbias::json::parse(exbias::read_text(path));
  } catch (const exbias::IoError& e) {
    throw exbias::ConfigError(e.what());
  } catch (const exbias::json::parse_error& e) {
    throw exbias::ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return exbias::config_from_json(doc);
}

int cmd_run(const std::string& config_path, std::string out, int workers, bool force, bool dump) {
  const auto config = load_config(config_path);
  std::filesystem::path dir;
  if (!out.empty()) {
    dir = out;
  } else if (!config.output_dir.empty()) {
    dir = config.output_dir;
    if (dir.is_relative()) dir = exbias::default_output_root() / dir;
  } else {
    dir = exbias::default_output_root() / ("seed-" + std::to_string(config.seed));
  }
  std::error_code ec;
  if (!force && std::filesystem::exists(dir, ec) && !std::filesystem::is_empty(dir, ec)) {
    throw exbias::OutputExistsError("output directory '" + dir.string() + "' is not empty; pass --force to overwrite");
  }
  exbias::RunOptions opts;
  opts.workers = workers;
  opts.dump_data = dump;
  const auto bundle = exbias::run_experiment(config, opts);
  exbias::emit_outputs(bundle, dir, force);
  std::cout << exbias::summary_csv(bundle);
  std::cerr << "wrote " << dir.string() << "\n";
  for (const auto& f : bundle.failures) std::cerr << "failed " << f.task << " " << f.index << ": " << f.error << "\n";
  return bundle.ok() ? kExitOk : kExitRuntime;
}

int cmd_check_gradients(const std::string& kind, int runs) {
  std::vector<exbias::ModelKind> kinds;
  if (kind.empty()) {
    kinds = {exbias::ModelKind::kMnl, exbias::ModelKind::kGev, exbias::ModelKind::kBl, exbias::ModelKind::kBpr,
             exbias::ModelKind::kIpsBpr};
  } else {
    kinds = {exbias::model_kind_from_string(kind)};
    if (!exbias::is_parametric(kinds[0])) throw exbias::ConfigError("'" + kind + "' has no gradient");
  }
  exbias::HyperParams hyper;
  hyper.dim = 3;
  bool ok = true;
  for (auto k : kinds) {
    double worst = 0.0;
    for (int r = 0; r < runs; ++r) {
      const exbias::RngHandle rng(static_cast<std::uint64_t>(r), static_cast<std::uint64_t>(k));
      const auto inst = exbias::gradient_instance(rng);
      worst = std::max(worst, exbias::gradient_check(k, inst.events, hyper, inst.nests, rng));
    }
    const bool pass = worst < 1e-4;
    ok = ok && pass;
    std::printf("%-8s max_rel_error=%.3e %s\n", std::string(exbias::to_string(k)).c_str(), worst, pass ? "ok" : "FAIL");
  }
  return ok ? kExitOk : kExitRuntime;
}

int cmd_solve_rho(double ratio, int n_items, int size_a, int n_bias, int k) {
  const auto catalog = exbias::build_catalog(n_items, size_a, n_bias, exbias::RngHandle(0));
  const double rho = exbias::solve_force_prob(ratio, catalog, k);
  const int nb = static_cast<int>(catalog.set_b.size());
  const auto rates = exbias::overexposure_rates(rho, nb, n_bias, k);
  std::printf("rho=%.6f bias_rate=%.6f other_rate=%.6f ratio=%.6f\n", rho, rates.bias, rates.other,
              rates.bias / rates.other);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Exposure-bias simulation lab"};
  app.require_subcommand(1);

  std::string config_path, out, kind;
  int workers = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  bool force = false, dump = false;
  auto* run = app.add_subcommand("run", "Run a full experiment and write its outputs");
  run->add_option("--config", config_path, "Config JSON (or a results manifest)")->required();
  run->add_option("--out", out, "Output directory (default: $EXBIAS_OUTPUT_ROOT or ./runs)");
  run->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
  run->add_flag("--force", force, "Overwrite a non-empty output directory");
  run->add_flag("--dump-data", dump, "Also write repetition 0 logs, design, population and trained models");

  int runs = 10;
  auto* grad = app.add_subcommand("check-gradients", "Finite-difference gradient check");
  grad->add_option("--kind", kind, "Model kind (default: all parametric kinds)");
  grad->add_option("--runs", runs, "Random instances per kind")->check(CLI::PositiveNumber);

  double ratio = 3.2;
  int n_items = 100, size_a = 50, n_bias = 5, k = 4;
  auto* rho = app.add_subcommand("solve-rho", "Solve the forcing probability for an exposure ratio");
  rho->add_option("--ratio", ratio, "Target bias/other exposure ratio")->required();
  rho->add_option("--n-items", n_items);
  rho->add_option("--size-a", size_a);
  rho->add_option("--n-bias", n_bias);
  rho->add_option("--slate-size", k);

  auto* val = app.add_subcommand("validate", "Validate a config without running it");
  val->add_option("--config", config_path, "Config JSON")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*run) return cmd_run(config_path, out, workers, force, dump);
    if (*grad) return cmd_check_gradients(kind, runs);
    if (*rho) return cmd_solve_rho(ratio, n_items, size_a, n_bias, k);
    if (*val) {
      const auto c = load_config(config_path);
      std::cout << exbias::to_json(c).dump(2) << "\n";
      return kExitOk;
    }
  } catch (const exbias::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
