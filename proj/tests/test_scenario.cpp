#include <chiral/scenario.hpp>

#include <gtest/gtest.h>

#include <random>
#include <sys/wait.h>

using namespace chiral;

namespace {

const fs::path kScenarios = SCENARIO_DIR;

fs::path fresh_dir(const std::string& tag) {
  const fs::path d = fs::temp_directory_path() / ("chiral_test_" + tag);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Cmd {
  int code;
  std::string out, err;
};

Cmd chiralsim(const std::string& args, const fs::path& out_dir) {
  const fs::path o = out_dir / "stdout.txt", e = out_dir / "stderr.txt";
  const std::string cmd = "CHIRAL_OUT_DIR='" + out_dir.string() + "' '" CHIRALSIM_PATH "' " + args + " > '" +
                          o.string() + "' 2> '" + e.string() + "'";
  const int st = std::system(cmd.c_str());
  return {WIFEXITED(st) ? WEXITSTATUS(st) : -1, slurp(o), slurp(e)};
}

const char* kWeak = R"(kind: sweep-weak
device:
  kappa_em_mhz: 0.5
  phi_c_deg: 90
  phi_wg_deg: 90
  f0_ghz: 6.441
grid:
  start_mhz: -25
  stop_mhz: 25
  points: 11
)";

std::string replace(std::string s, const std::string& a, const std::string& b) {
  const auto p = s.find(a);
  if (p != std::string::npos) s.replace(p, a.size(), b);
  return s;
}

void expect_config_error(const std::string& text, const std::string& fragment) {
  try {
    parse_scenario(text);
    ADD_FAILURE() << "no error, expected: " << fragment;
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
  }
}

} // namespace

TEST(Config, UnitSuffixesScale) {
  const auto a = parse_scenario(kWeak);
  const auto b = parse_scenario(replace(replace(kWeak, "kappa_em_mhz: 0.5", "kappa_em_khz: 500"),
                                        "phi_c_deg: 90", "phi_c_rad: 1.5707963267948966"));
  EXPECT_DOUBLE_EQ(a.section("device").num("kappa_em"), 5e5);
  EXPECT_DOUBLE_EQ(b.section("device").num("kappa_em"), 5e5);
  EXPECT_NEAR(a.section("device").num("phi_c"), b.section("device").num("phi_c"), 1e-15);
  EXPECT_DOUBLE_EQ(a.section("device").num("f0"), 6.441e9);
  EXPECT_DOUBLE_EQ(a.section("device").rate("kappa_em"), mhz(0.5));

  const auto t = parse_scenario("kind: budget\ndevice:\n  gamma_prime0_hz: 1\n  temperature_mk: 65\n"
                                "  f0_ghz: 6\ngrid:\n  start_khz: 1\n  stop_mhz: 1\n  points: 3\n");
  EXPECT_DOUBLE_EQ(t.section("device").num("temperature"), 0.065);
  const auto v = parse_scenario("kind: bound\ndevice:\n  phase_var_deg2: 4.9\n");
  EXPECT_NEAR(v.section("device").num("phase_var"), 4.9 * std::pow(constants::pi / 180, 2), 1e-18);
  const auto w = parse_scenario("kind: rabi\ndevice:\n  gamma_f_mhz: 1\n  f0_ghz: 6\ndrive:\n  power_fw: 0.1\n"
                                "grid:\n  start_ns: 0\n  stop_us: 1\n  points: 3\n");
  EXPECT_DOUBLE_EQ(w.section("grid").num("stop"), 1e-6);
  EXPECT_DOUBLE_EQ(w.section("drive").num("power"), 1e-16);
}

TEST(Config, SchemaViolationsCiteLine) {
  expect_config_error(replace(kWeak, "kappa_em_mhz", "kapa_em_mhz"), "device.kapa_em_mhz: unknown key (line 3)");
  expect_config_error(replace(kWeak, "kappa_em_mhz", "kappa_em_mk"), "unit '_mk' does not match");
  expect_config_error(replace(kWeak, "kappa_em_mhz", "kappa_em"), "missing unit suffix");
  expect_config_error(replace(kWeak, "points: 11", "points: 1"), "grid.points: need at least 2 points (line 10)");
  expect_config_error(replace(kWeak, "stop_mhz: 25", "stop_mhz: -30"), "grid.stop");
  expect_config_error(replace(kWeak, "kind: sweep-weak", "kind: sweep-wide"), "unknown kind");
  expect_config_error(std::string(kWeak) + "drive:\n  rabi_mhz: 1\n", "drive: unknown section");
  expect_config_error(std::string(kWeak) + "noise:\n  sigma: 0.1\n", "seed: required");
  expect_config_error(replace(kWeak, "  f0_ghz: 6.441\n", ""), "device.f0: required");
  expect_config_error(replace(kWeak, "  phi_wg_deg: 90\n", "  phi_wg_deg: 90\n  d_mm: 3\n"), "exactly one");
  expect_config_error(replace(kWeak, "  f0_ghz: 6.441\n", "  f0_ghz: 6.441\n  f0_mhz: 6441\n"), "given twice");
  expect_config_error(replace(kWeak, "points: 11", "points: many"), "grid.points: cannot read");
  expect_config_error("kind: sweep-weak\n  x: [\n", "yaml:");
  expect_config_error("kind: mollow\nseed: 1\nnoise:\n  sigma: 0.1\n", "not supported");
  expect_config_error("kind: rabi\ndevice:\n  gamma_f_mhz: 1\ndrive:\n  rabi_mhz: 1\n  power_fw: 1\n"
                      "grid:\n  start_ns: 0\n  stop_us: 1\n  points: 3\n",
                      "exactly one of 'rabi' and 'power'");
  expect_config_error("kind: bound\ndevice:\n  gamma_f_mhz: 1\n", "go together");
}

TEST(Config, GeometryGivesPropagationPhase) {
  const auto sc = parse_scenario(replace(kWeak, "  phi_wg_deg: 90\n", "  d_mm: 4.2\n  eps_eff: 6.45\n"));
  const auto dir = fresh_dir("geometry");
  run_scenario(sc, dir);
  std::ifstream in(dir / "sweep-weak.json");
  const auto j = ojson::parse(in);
  EXPECT_NEAR(j["phi_wg_rad"].get<double>(), propagation_phase(WaveguideGeometry(4.2e-3, 6.441e9, 6.45)), 1e-15);
}

TEST(Numbers, FormatParseRoundTrip) {
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<std::uint64_t> bits;
  int n = 0;
  while (n < 20000) {
    const std::uint64_t b = bits(rng);
    double x;
    std::memcpy(&x, &b, sizeof x);
    if (std::isnan(x)) continue;
    const auto y = parse_double(format_double(x));
    ASSERT_TRUE(y.has_value());
    ASSERT_EQ(std::memcmp(&x, &*y, sizeof x), 0) << format_double(x);
    ++n;
  }
  for (double x : {0.0, -0.0, 1e-320, double(INFINITY), -double(INFINITY)}) EXPECT_EQ(*parse_double(format_double(x)), x);
  EXPECT_TRUE(std::isnan(*parse_double(format_double(std::nan("")))));
  EXPECT_FALSE(parse_double("1.0x").has_value());
  EXPECT_FALSE(parse_double("").has_value());
}

TEST(Numbers, Sha256KnownVector) {
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(TraceCsv, RoundTripIsExact) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g;
  std::vector<double> f;
  std::vector<cplx> t;
  for (int i = 0; i < 500; ++i) {
    f.push_back(6.4e9 + 1e3 * i + g(rng));
    t.emplace_back(g(rng), g(rng));
  }
  for (bool noisy : {false, true}) {
    SpectrumTrace tr(f, t);
    if (noisy) tr = synthesize_noisy(tr, 0.01, 4);
    const std::string text = write_trace_csv(tr);
    std::istringstream in(text);
    const auto back = read_trace_csv(in);
    EXPECT_EQ(back.freqs, tr.freqs);
    EXPECT_EQ(back.t, tr.t);
    EXPECT_EQ(back.noise_sigma, tr.noise_sigma);
    EXPECT_EQ(write_trace_csv(back), text);
  }
}

TEST(TraceCsv, HeaderAndUnwrappedPhase) {
  std::vector<double> f;
  std::vector<cplx> t;
  for (int i = 0; i < 50; ++i) {
    f.push_back(i);
    t.push_back(std::polar(1.0, 0.3 * i));
  }
  const auto tab = read_table_text(write_trace_csv(SpectrumTrace(f, t)));
  EXPECT_EQ(tab.header, (std::vector<std::string>{"freq_hz", "re_t", "im_t", "abs_t", "arg_t_rad"}));
  for (int i = 0; i < 50; ++i) EXPECT_NEAR(tab.rows[i][4], 0.3 * i, 1e-12);
}

TEST(TraceCsv, NanPointsSurvive) {
  const double nan = std::nan("");
  SpectrumTrace tr({1, 2, 3, 4}, {cplx(1, 0), cplx(nan, nan), cplx(0, 1), cplx(-1, 0)});
  const std::string text = write_trace_csv(tr);
  std::istringstream in(text);
  const auto back = read_trace_csv(in);
  EXPECT_TRUE(std::isnan(back.t[1].real()));
  EXPECT_EQ(back.t[3], cplx(-1, 0));
  const auto tab = read_table_text(text);
  // phase carries across the gap
  EXPECT_NEAR(tab.rows[3][4], constants::pi, 1e-12);
}

TEST(TraceCsv, RejectsBadInput) {
  std::istringstream a("freq,re,im\n1,2,3\n");
  EXPECT_THROW(read_trace_csv(a), ConfigError);
  std::istringstream b("freq_hz,re_t,im_t,abs_t,arg_t_rad\n1,2,3\n");
  EXPECT_THROW(read_trace_csv(b), ConfigError);
  std::istringstream c("freq_hz,re_t,im_t,abs_t,arg_t_rad\n1,2,3,x,5\n");
  EXPECT_THROW(read_trace_csv(c), ConfigError);
}

TEST(PsdCsv, RoundTrip) {
  PsdTrace p{{1.5, 2.5, 3.5}, {1e-27, 3.3e-26, 0.0}};
  const auto text = write_psd_csv(p);
  EXPECT_EQ(text.substr(0, text.find('\n')), "freq_hz,psd_w_per_hz");
  std::istringstream in(text);
  const auto q = read_psd_csv(in);
  EXPECT_EQ(q.freqs, p.freqs);
  EXPECT_EQ(q.psd, p.psd);
}

TEST(FitReport, RoundTrip) {
  std::vector<double> f;
  for (int i = 0; i <= 400; ++i) f.push_back(6.441e9 + (i - 200) * 5e4);
  const auto tr = synthesize_noisy(fano_trace(f, mhz(1.0), mhz(1.4), 6.441e9, 0.1), 0.01, 12);
  FitOptions o;
  o.background = true;
  for (const auto& r : {fit_fano(tr), fit_fano(tr, std::nullopt, o), circle_fit(tr)}) {
    const ojson j = fit_to_json(r);
    const auto back = fit_from_json(ojson::parse(j.dump(2)));
    // Hz <-> rad/s costs at most an ulp; everything else is exact
    const ojson k = fit_to_json(back);
    for (const auto& [key, v] : j.items()) {
      if (v.is_number_float()) EXPECT_NEAR(k[key].get<double>(), v.get<double>(), 4e-16 * std::abs(v.get<double>())) << key;
      else if (key != "covariance") EXPECT_EQ(k[key], v) << key;
    }
    EXPECT_EQ(back.method, r.method);
    EXPECT_NEAR(back.gamma_1d / r.gamma_1d, 1.0, 1e-15);
    EXPECT_EQ(back.f0, r.f0);
    EXPECT_EQ(back.phi_fano, r.phi_fano);
    EXPECT_EQ(back.bg_offset, r.bg_offset);
    EXPECT_EQ(back.covariance.rows(), r.covariance.rows());
    EXPECT_NEAR((back.covariance - r.covariance).norm() / r.covariance.norm(), 0.0, 1e-15);
  }
}

TEST(FitReport, NonFiniteAsText) {
  EXPECT_EQ(json_number(INFINITY).dump(), "\"inf\"");
  EXPECT_TRUE(std::isinf(json_to_double(json_number(INFINITY))));
  EXPECT_THROW(json_to_double(ojson("abc")), ConfigError);
}

TEST(Run, EveryScenarioValidatesAndRuns) {
  const auto dir = fresh_dir("all");
  int n = 0;
  for (const auto& e : fs::directory_iterator(kScenarios)) {
    if (e.path().extension() != ".yaml") continue;
    const auto sc = load_scenario(e.path());
    const auto res = run_scenario(sc, dir);
    ASSERT_GE(res.files.size(), 2u) << e.path();
    const auto m = ojson::parse(slurp(res.files.back()));
    EXPECT_EQ(m["config_sha256"], sha256_hex(slurp(e.path())));
    EXPECT_EQ(m["kind"], sc.kind);
    ++n;
  }
  EXPECT_EQ(n, 9);
}

TEST(Run, DeterministicArtifacts) {
  const auto a = fresh_dir("det_a"), b = fresh_dir("det_b");
  for (const auto& e : fs::directory_iterator(kScenarios)) {
    if (e.path().extension() != ".yaml") continue;
    const auto sc = load_scenario(e.path());
    const auto ra = run_scenario(sc, a);
    const auto rb = run_scenario(sc, b);
    ASSERT_EQ(ra.files.size(), rb.files.size());
    for (std::size_t i = 0; i + 1 < ra.files.size(); ++i)
      EXPECT_EQ(slurp(ra.files[i]), slurp(rb.files[i])) << ra.files[i];
  }
}

TEST(Run, SeedChangesNoise) {
  const auto text = slurp(kScenarios / "fit.yaml");
  const auto a = fresh_dir("seed_a"), b = fresh_dir("seed_b");
  run_scenario(parse_scenario(text), a);
  run_scenario(parse_scenario(replace(text, "seed: 2024", "seed: 2025")), b);
  EXPECT_NE(slurp(a / "fit.csv"), slurp(b / "fit.csv"));
}

TEST(Run, SweepWeakWindsTwoPi) {
  const auto dir = fresh_dir("weak");
  run_scenario(load_scenario(kScenarios / "sweep_weak.yaml"), dir);
  const auto tr = read_trace_file(dir / "sweep_weak.csv");
  EXPECT_NEAR(phase_winding(tr), constants::two_pi, 0.05 * constants::two_pi);
  // on resonance t = -1
  const auto k = tr.size() / 2;
  EXPECT_NEAR(std::abs(tr.t[k] + 1.0), 0.0, 1e-12);
  const auto j = ojson::parse(slurp(dir / "sweep_weak.json"));
  EXPECT_NEAR(j["phase_winding_rad"].get<double>(), constants::two_pi, 0.05 * constants::two_pi);
}

TEST(Run, MollowHasThreePeaks) {
  const auto dir = fresh_dir("mollow");
  run_scenario(load_scenario(kScenarios / "mollow.yaml"), dir);
  std::ifstream in(dir / "mollow.csv");
  const auto p = read_psd_csv(in);
  std::vector<double> peaks;
  for (std::size_t i = 1; i + 1 < p.psd.size(); ++i)
    if (p.psd[i] > p.psd[i - 1] && p.psd[i] > p.psd[i + 1]) peaks.push_back(p.freqs[i] - 6.441e9);
  ASSERT_EQ(peaks.size(), 3u);
  EXPECT_NEAR(peaks[0], -10e6, 1e5);
  EXPECT_NEAR(peaks[1], 0.0, 1e5);
  EXPECT_NEAR(peaks[2], 10e6, 1e5);
}

TEST(Run, FitScenarioRecoversRates) {
  const auto dir = fresh_dir("fit");
  run_scenario(load_scenario(kScenarios / "fit.yaml"), dir);
  const auto j = ojson::parse(slurp(dir / "fit_fit.json"));
  const auto dr = decay_rates(ChiralCoupling(0.5e6, constants::pi / 2, 80 * constants::pi / 180));
  for (const char* m : {"fano", "circle"}) {
    const auto r = fit_from_json(j[m]);
    EXPECT_NEAR(rad_to_hz(r.gamma_1d) / dr.gamma_f, 1.0, 0.02) << m;
    EXPECT_NEAR(rad_to_hz(r.gamma_tot) / (dr.gamma_f + dr.gamma_b + 364e3), 1.0, 0.02) << m;
  }
}

TEST(Run, FitFromTraceFile) {
  const auto dir = fresh_dir("fit_file");
  run_scenario(load_scenario(kScenarios / "sweep_weak.yaml"), dir);
  const std::string cfg = "kind: fit\ninput:\n  trace: sweep_weak.csv\noptions:\n  circle: false\n";
  const auto sc = parse_scenario(cfg, dir);
  const auto res = run_scenario(sc, dir);
  const auto j = ojson::parse(slurp(dir / "fit_fit.json"));
  EXPECT_FALSE(j.contains("circle"));
  EXPECT_NEAR(j["fano"]["gamma_1d_hz"].get<double>(), 1e6, 1e-3);
  EXPECT_EQ(res.files.size(), 2u);
}

TEST(Run, BudgetPurcellSaturates) {
  const auto dir = fresh_dir("budget");
  run_scenario(load_scenario(kScenarios / "budget.yaml"), dir);
  const auto t = read_table_text(slurp(dir / "budget.csv"));
  EXPECT_EQ(t.header, (std::vector<std::string>{"gamma_1d_hz", "gamma_prime_hz", "beta", "purcell"}));
  for (std::size_t i = 1; i < t.rows.size(); ++i) EXPECT_GT(t.rows[i][3], t.rows[i - 1][3]);
  for (std::size_t i = 2; i < t.rows.size(); ++i)
    EXPECT_LT(t.rows[i][3] - t.rows[i - 1][3], t.rows[i - 1][3] - t.rows[i - 2][3]);
}

TEST(Run, OutputDirFromEnvironment) {
  setenv("CHIRAL_OUT_DIR", "/tmp/chiral_env_dir", 1);
  EXPECT_EQ(output_dir(), fs::path("/tmp/chiral_env_dir"));
  unsetenv("CHIRAL_OUT_DIR");
  EXPECT_EQ(output_dir(), fs::path("chiral_out"));
}

TEST(Cli, ExitCodes) {
  const auto dir = fresh_dir("cli");
  {
    std::ofstream f(dir / "one_point.yaml");
    f << replace(kWeak, "points: 11", "points: 1");
  }
  {
    std::ofstream f(dir / "overdamped.yaml");
    f << "kind: rabi\ndevice:\n  gamma_f_mhz: 10\ndrive:\n  rabi_khz: 1\n"
         "grid:\n  start_ns: 0\n  stop_us: 1\n  points: 5\n";
  }
  const auto ok = chiralsim("run '" + (kScenarios / "sweep_weak.yaml").string() + "'", dir);
  EXPECT_EQ(ok.code, 0) << ok.err;
  EXPECT_TRUE(fs::exists(dir / "sweep_weak.csv"));

  const auto bad = chiralsim("run '" + (dir / "one_point.yaml").string() + "'", dir);
  EXPECT_EQ(bad.code, 2);
  EXPECT_NE(bad.err.find("grid.points"), std::string::npos) << bad.err;

  const auto num = chiralsim("run '" + (dir / "overdamped.yaml").string() + "'", dir);
  EXPECT_EQ(num.code, 1);
  EXPECT_NE(num.err.find("[dynamics]"), std::string::npos) << num.err;

  EXPECT_EQ(chiralsim("validate '" + (kScenarios / "cmt.yaml").string() + "'", dir).code, 0);
  EXPECT_EQ(chiralsim("validate '" + (dir / "missing.yaml").string() + "'", dir).code, 2);
  EXPECT_EQ(chiralsim("frobnicate", dir).code, 2);
  EXPECT_EQ(chiralsim("bound", dir).code, 2);
}

TEST(Cli, FitAndBound) {
  const auto dir = fresh_dir("cli_fit");
  ASSERT_EQ(chiralsim("run '" + (kScenarios / "fit.yaml").string() + "'", dir).code, 0);
  const auto r = chiralsim("fit '" + (dir / "fit.csv").string() + "' --fano --circle", dir);
  ASSERT_EQ(r.code, 0) << r.err;
  const auto j = ojson::parse(r.out);
  EXPECT_TRUE(j.contains("fano"));
  EXPECT_TRUE(j.contains("circle"));
  const auto d = chiralsim("fit '" + (dir / "fit.csv").string() + "'", dir);
  EXPECT_FALSE(ojson::parse(d.out).contains("circle"));

  const double v = 4.9 * std::pow(constants::pi / 180, 2);
  const auto b = chiralsim("bound --phase-var " + format_double(v), dir);
  ASSERT_EQ(b.code, 0);
  EXPECT_NEAR(ojson::parse(b.out)["eta_d"].get<double>(), 1340, 0.05 * 1340);
  const auto rel = chiralsim("bound --phase-var " + format_double(v) + " --relative", dir);
  EXPECT_NEAR(ojson::parse(rel.out)["eta_d"].get<double>(), 2 * 1340, 0.05 * 2680);
  EXPECT_EQ(chiralsim("bound --phase-var 1.5", dir).code, 1);
}
