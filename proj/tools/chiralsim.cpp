#include <chiral/scenario.hpp>

#include <CLI11.hpp>

#include <iostream>

using namespace chiral;

namespace {

int cmd_run(const std::string& config) {
  const auto sc = load_scenario(config);
  const auto res = run_scenario(sc, output_dir());
  for (const auto& f : res.files) std::cout << f.string() << "\n";
  return 0;
}

int cmd_validate(const std::string& config) {
  const auto sc = load_scenario(config);
  std::cout << "ok: " << sc.kind << " (" << sc.name << ")\n";
  return 0;
}

int cmd_fit(const std::string& trace, bool fano, bool circle, bool background) {
  const auto tr = read_trace_file(trace);
  if (!fano && !circle) fano = true;
  FitOptions opt;
  opt.background = background;
  ojson j;
  if (fano) j["fano"] = fit_to_json(fit_fano(tr, std::nullopt, opt));
  if (circle) j["circle"] = fit_to_json(circle_fit(tr));
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_bound(double var, bool relative) {
  ojson j;
  j["phase_var_rad2"] = json_number(var);
  j["relative"] = relative;
  j["eta_d"] = json_number(phase_noise_bound(var, relative));
  std::cout << j.dump(2) << "\n";
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"chiral atom simulation and analysis"};
  app.set_version_flag("--version", CHIRAL_VERSION);
  app.require_subcommand(1);

  std::string config, trace;
  bool fano = false, circle = false, background = false, relative = false;
  double var = 0;

  auto* run = app.add_subcommand("run", "run a scenario; artifacts go to $CHIRAL_OUT_DIR");
  run->add_option("config", config, "scenario file")->required();
  auto* val = app.add_subcommand("validate", "check a scenario file against the schema");
  val->add_option("config", config, "scenario file")->required();
  auto* fit = app.add_subcommand("fit", "fit a trace CSV, report to stdout");
  fit->add_option("trace", trace, "trace CSV")->required();
  fit->add_flag("--fano", fano, "Fano-Lorentzian least squares (default)");
  fit->add_flag("--circle", circle, "circle fit in the complex plane");
  fit->add_flag("--background", background, "fit a linear complex background");
  auto* bound = app.add_subcommand("bound", "directionality bound from phase noise");
  bound->add_option("--phase-var", var, "phase variance in rad^2")->required();
  bound->add_flag("--relative", relative, "variance is of the relative phase");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*run) return cmd_run(config);
    if (*val) return cmd_validate(config);
    if (*fit) return cmd_fit(trace, fano, circle, background);
    if (*bound) return cmd_bound(var, relative);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error [" << e.module() << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
