#pragma once

#include <chiral/cmt.hpp>
#include <chiral/dynamics.hpp>
#include <chiral/fit.hpp>
#include <chiral/slh.hpp>
#include <chiral/thermal.hpp>
#include <chiral/trace.hpp>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <yaml-cpp/yaml.h>

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#ifndef CHIRAL_VERSION
#define CHIRAL_VERSION "0.0.0"
#endif

namespace chiral {

using ojson = nlohmann::ordered_json;
namespace fs = std::filesystem;

// ---------------------------------------------------------------- numbers

inline std::string format_double(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

inline std::optional<double> parse_double(std::string_view s) {
  double x = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), x);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) return std::nullopt;
  return x;
}

// non-finite values go out as strings so the JSON stays valid
inline ojson json_number(double x) {
  if (std::isfinite(x)) return x;
  return format_double(x);
}

inline double json_to_double(const ojson& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    if (auto v = parse_double(j.get<std::string>())) return *v;
  }
  throw ConfigError("expected a number, got " + j.dump());
}

inline std::string sha256_hex(std::string_view data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

// ---------------------------------------------------------------- tables

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

inline std::string write_table(const Table& t) {
  std::string out;
  for (std::size_t i = 0; i < t.header.size(); ++i) out += (i ? "," : "") + t.header[i];
  out += '\n';
  for (const auto& r : t.rows) {
    for (std::size_t i = 0; i < r.size(); ++i) {
      if (i) out += ',';
      out += format_double(r[i]);
    }
    out += '\n';
  }
  return out;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') { out.push_back(cur); cur.clear(); }
    else if (c != '\r') cur += c;
  }
  out.push_back(cur);
  return out;
}

inline Table read_table(std::istream& in) {
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("csv: empty file");
  t.header = split_csv_line(line);
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != t.header.size())
      throw ConfigError("csv line " + std::to_string(lineno) + ": expected " +
                        std::to_string(t.header.size()) + " columns");
    std::vector<double> row;
    for (const auto& c : cells) {
      const auto v = parse_double(c);
      if (!v) throw ConfigError("csv line " + std::to_string(lineno) + ": bad number '" + c + "'");
      row.push_back(*v);
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

inline Table read_table_text(const std::string& s) {
  std::istringstream in(s);
  return read_table(in);
}

// ---------------------------------------------------------------- traces

inline const std::vector<std::string>& trace_header() {
  static const std::vector<std::string> h{"freq_hz", "re_t", "im_t", "abs_t", "arg_t_rad"};
  return h;
}

// unwrap, carrying the last finite phase across NaN points
inline std::vector<double> unwrapped_phase_skipping(const std::vector<cplx>& t) {
  std::vector<double> out(t.size(), std::nan(""));
  bool have = false;
  double acc = 0, prev = 0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i].real()) || !std::isfinite(t[i].imag())) continue;
    const double a = std::arg(t[i]);
    acc = have ? acc + std::remainder(a - prev, constants::two_pi) : a;
    have = true;
    prev = a;
    out[i] = acc;
  }
  return out;
}

// A sigma_t column is appended when the trace carries noise levels.
inline std::string write_trace_csv(const SpectrumTrace& tr) {
  Table t;
  t.header = trace_header();
  if (tr.noise_sigma) t.header.push_back("sigma_t");
  const auto ph = unwrapped_phase_skipping(tr.t);
  for (std::size_t i = 0; i < tr.size(); ++i) {
    std::vector<double> r{tr.freqs[i], tr.t[i].real(), tr.t[i].imag(), std::abs(tr.t[i]), ph[i]};
    if (tr.noise_sigma) r.push_back((*tr.noise_sigma)[i]);
    t.rows.push_back(std::move(r));
  }
  return write_table(t);
}

inline SpectrumTrace read_trace_csv(std::istream& in) {
  const Table t = read_table(in);
  auto h = trace_header();
  const bool sig = t.header.size() == h.size() + 1 && t.header.back() == "sigma_t";
  if (sig) h.push_back("sigma_t");
  if (t.header != h) throw ConfigError("trace csv: header must be freq_hz,re_t,im_t,abs_t,arg_t_rad");
  std::vector<double> f;
  std::vector<cplx> v;
  std::vector<double> s;
  for (const auto& r : t.rows) {
    f.push_back(r[0]);
    v.emplace_back(r[1], r[2]);
    if (sig) s.push_back(r[5]);
  }
  std::optional<std::vector<double>> sigma;
  if (sig) sigma = std::move(s);
  return SpectrumTrace(std::move(f), std::move(v), std::move(sigma));
}

inline SpectrumTrace read_trace_file(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw ConfigError("cannot open trace " + p.string());
  return read_trace_csv(in);
}

struct PsdTrace {
  std::vector<double> freqs; // Hz
  std::vector<double> psd;   // W/Hz
};

inline std::string write_psd_csv(const PsdTrace& p) {
  Table t{{"freq_hz", "psd_w_per_hz"}, {}};
  for (std::size_t i = 0; i < p.freqs.size(); ++i) t.rows.push_back({p.freqs[i], p.psd[i]});
  return write_table(t);
}

inline PsdTrace read_psd_csv(std::istream& in) {
  const Table t = read_table(in);
  if (t.header != std::vector<std::string>{"freq_hz", "psd_w_per_hz"})
    throw ConfigError("psd csv: header must be freq_hz,psd_w_per_hz");
  PsdTrace p;
  for (const auto& r : t.rows) {
    p.freqs.push_back(r[0]);
    p.psd.push_back(r[1]);
  }
  return p;
}

// ---------------------------------------------------------------- fit reports

inline ojson fit_to_json(const FitResult& r) {
  const double s = 1.0 / constants::two_pi;
  ojson j;
  j["method"] = r.method;
  j["gamma_1d_hz"] = json_number(r.gamma_1d * s);
  j["sigma_gamma_1d_hz"] = json_number(r.sigma_gamma_1d * s);
  j["gamma_tot_hz"] = json_number(r.gamma_tot * s);
  j["sigma_gamma_tot_hz"] = json_number(r.sigma_gamma_tot * s);
  j["f0_hz"] = json_number(r.f0);
  j["sigma_f0_hz"] = json_number(r.sigma_f0);
  j["phi_fano_rad"] = json_number(r.phi_fano);
  j["sigma_phi_fano_rad"] = json_number(r.sigma_phi_fano);
  j["residual_rms"] = json_number(r.residual_rms);
  // rows/cols 0,1 in Hz
  ojson cov = ojson::array();
  for (Eigen::Index a = 0; a < r.covariance.rows(); ++a) {
    ojson row = ojson::array();
    for (Eigen::Index b = 0; b < r.covariance.cols(); ++b) {
      const double fa = a < 2 ? s : 1.0, fb = b < 2 ? s : 1.0;
      row.push_back(json_number(r.covariance(a, b) * fa * fb));
    }
    cov.push_back(row);
  }
  j["covariance"] = cov;
  if (r.bg_offset) {
    j["background"] = {
        {"offset", {json_number(r.bg_offset->real()), json_number(r.bg_offset->imag())}},
        {"slope_per_hz", {json_number(r.bg_slope->real()), json_number(r.bg_slope->imag())}},
        {"ref_hz", json_number(r.bg_ref_hz)}};
  } else {
    j["background"] = nullptr;
  }
  j["iterations"] = r.iterations;
  j["converged"] = r.converged;
  j["unphysical"] = r.unphysical;
  return j;
}

inline FitResult fit_from_json(const ojson& j) {
  const double s = constants::two_pi;
  FitResult r;
  try {
    r.method = j.at("method").get<std::string>();
    r.gamma_1d = json_to_double(j.at("gamma_1d_hz")) * s;
    r.sigma_gamma_1d = json_to_double(j.at("sigma_gamma_1d_hz")) * s;
    r.gamma_tot = json_to_double(j.at("gamma_tot_hz")) * s;
    r.sigma_gamma_tot = json_to_double(j.at("sigma_gamma_tot_hz")) * s;
    r.f0 = json_to_double(j.at("f0_hz"));
    r.sigma_f0 = json_to_double(j.at("sigma_f0_hz"));
    r.phi_fano = json_to_double(j.at("phi_fano_rad"));
    r.sigma_phi_fano = json_to_double(j.at("sigma_phi_fano_rad"));
    r.residual_rms = json_to_double(j.at("residual_rms"));
    const auto& cov = j.at("covariance");
    const auto n = static_cast<Eigen::Index>(cov.size());
    r.covariance.resize(n, n);
    for (Eigen::Index a = 0; a < n; ++a)
      for (Eigen::Index b = 0; b < n; ++b) {
        const double fa = a < 2 ? s : 1.0, fb = b < 2 ? s : 1.0;
        r.covariance(a, b) = json_to_double(cov.at(a).at(b)) * fa * fb;
      }
    const auto& bg = j.at("background");
    if (!bg.is_null()) {
      r.bg_offset = cplx(json_to_double(bg.at("offset").at(0)), json_to_double(bg.at("offset").at(1)));
      r.bg_slope = cplx(json_to_double(bg.at("slope_per_hz").at(0)),
                        json_to_double(bg.at("slope_per_hz").at(1)));
      r.bg_ref_hz = json_to_double(bg.at("ref_hz"));
    }
    r.iterations = j.at("iterations").get<int>();
    r.converged = j.at("converged").get<bool>();
    r.unphysical = j.at("unphysical").get<bool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("fit report: ") + e.what());
  }
  return r;
}

// ---------------------------------------------------------------- config schema

enum class Dim { frequency, angle, temperature, length, power, phase_var, time, number, integer, text, flag };

inline const char* dim_name(Dim d) {
  switch (d) {
    case Dim::frequency: return "frequency (_hz, _khz, _mhz, _ghz)";
    case Dim::angle: return "angle (_deg, _rad)";
    case Dim::temperature: return "temperature (_mk, _k)";
    case Dim::length: return "length (_mm, _m)";
    case Dim::power: return "power (_fw, _w)";
    case Dim::phase_var: return "phase variance (_rad2, _deg2)";
    case Dim::time: return "time (_ns, _us, _ms, _s)";
    case Dim::number: return "number";
    case Dim::integer: return "integer";
    case Dim::text: return "text";
    case Dim::flag: return "true/false";
  }
  return "?";
}

inline bool has_units(Dim d) { return d < Dim::number; }

struct Unit {
  const char* suffix;
  Dim dim;
  double scale; // to SI (Hz, rad, K, m, W, rad^2, s)
};

inline constexpr double kDeg = constants::pi / 180.0;

inline constexpr Unit kUnits[] = {
    {"hz", Dim::frequency, 1.0},        {"khz", Dim::frequency, 1e3},
    {"mhz", Dim::frequency, 1e6},       {"ghz", Dim::frequency, 1e9},
    {"deg", Dim::angle, kDeg},          {"rad", Dim::angle, 1.0},
    {"mk", Dim::temperature, 1e-3},     {"k", Dim::temperature, 1.0},
    {"mm", Dim::length, 1e-3},          {"m", Dim::length, 1.0},
    {"fw", Dim::power, 1e-15},          {"w", Dim::power, 1.0},
    {"rad2", Dim::phase_var, 1.0},      {"deg2", Dim::phase_var, kDeg * kDeg},
    {"ns", Dim::time, 1e-9},            {"us", Dim::time, 1e-6},
    {"ms", Dim::time, 1e-3},            {"s", Dim::time, 1.0},
};

struct Field {
  Dim dim;
  bool required = false;
};

using Schema = std::map<std::string, Field>;

struct Value {
  Dim dim = Dim::number;
  double si = 0;        // dimensional and plain numbers
  long long integer = 0;
  bool flag = false;
  std::string text;
  std::string key;      // as written
  int line = 0;
};

inline std::string at_line(int line) { return " (line " + std::to_string(line) + ")"; }

struct Section {
  std::string name;
  int line = 0;
  std::map<std::string, Value> values; // by base name

  bool has(const std::string& k) const { return values.count(k) > 0; }
  const Value& get(const std::string& k) const {
    auto it = values.find(k);
    if (it == values.end()) throw ConfigError(name + "." + k + ": missing" + at_line(line));
    return it->second;
  }
  double num(const std::string& k) const { return get(k).si; }
  double num_or(const std::string& k, double d) const { return has(k) ? num(k) : d; }
  // frequencies come back as angular rates
  double rate(const std::string& k) const { return hz_to_rad(num(k)); }
  double rate_or(const std::string& k, double d_hz) const { return hz_to_rad(num_or(k, d_hz)); }
  std::string text_or(const std::string& k, const std::string& d) const { return has(k) ? get(k).text : d; }
  bool flag_or(const std::string& k, bool d) const { return has(k) ? get(k).flag : d; }
};

struct KindSpec {
  std::map<std::string, Schema> sections;
  bool noise = false;
};

namespace detail {

inline Schema atom_schema() {
  return {{"gamma_f", {Dim::frequency, true}},
          {"gamma_b", {Dim::frequency}},
          {"gamma_prime", {Dim::frequency}},
          {"gamma_phi", {Dim::frequency}},
          {"f0", {Dim::frequency, true}}};
}

inline Schema coupling_schema() {
  return {{"kappa_em", {Dim::frequency, true}}, {"phi_c", {Dim::angle, true}},
          {"phi_wg", {Dim::angle}},             {"d", {Dim::length}},
          {"eps_eff", {Dim::number}},           {"gamma_prime", {Dim::frequency}},
          {"gamma_phi", {Dim::frequency}},      {"f0", {Dim::frequency, true}}};
}

inline Schema freq_grid() {
  return {{"start", {Dim::frequency, true}}, {"stop", {Dim::frequency, true}}, {"points", {Dim::integer, true}}};
}

inline Schema drive_schema() { return {{"rabi", {Dim::frequency}}, {"power", {Dim::power}}}; }

inline Schema output_schema() { return {{"name", {Dim::text}}}; }

} // namespace detail

inline const std::map<std::string, KindSpec>& kind_specs() {
  using namespace detail;
  static const std::map<std::string, KindSpec> k{
      {"sweep-weak", {{{"device", coupling_schema()}, {"grid", freq_grid()}}, true}},
      {"sweep-strong", {{{"device", atom_schema()}, {"drive", drive_schema()}, {"grid", freq_grid()}}, true}},
      {"mollow", {{{"device", atom_schema()}, {"drive", drive_schema()}, {"grid", freq_grid()}}, false}},
      {"rabi",
       {{{"device", [] { auto s = atom_schema(); s["f0"].required = false; return s; }()},
         {"drive", drive_schema()},
         {"grid",
          {{"start", {Dim::time, true}}, {"stop", {Dim::time, true}}, {"points", {Dim::integer, true}}}}},
        false}},
      {"cmt",
       {{{"device",
          {{"preset", {Dim::text}},       {"f_e", {Dim::frequency}},     {"f_c", {Dim::frequency}},
           {"f_r", {Dim::frequency}},     {"g_ec", {Dim::frequency}},    {"g_cr", {Dim::frequency}},
           {"kappa_e", {Dim::frequency}}, {"kappa_t", {Dim::frequency}}, {"gamma_e", {Dim::frequency}},
           {"gamma_c", {Dim::frequency}}, {"epsilon", {Dim::frequency}}, {"delta_mod", {Dim::frequency}},
           {"n_trunc", {Dim::integer}},   {"phase", {Dim::text}}}},
         {"grid", freq_grid()}},
        true}},
      {"two-tone",
       {{{"device",
          {{"kappa_l", {Dim::frequency, true}},
           {"kappa_r", {Dim::frequency, true}},
           {"anharmonicity", {Dim::frequency, true}},
           {"gamma_f", {Dim::frequency, true}},
           {"gamma_b", {Dim::frequency}},
           {"gamma_prime", {Dim::frequency}},
           {"gamma_phi", {Dim::frequency}},
           {"phi_c", {Dim::angle}},
           {"phi_wg_ef", {Dim::angle}},
           {"gamma_prime_ef", {Dim::frequency}},
           {"gamma_phi_ef", {Dim::frequency}},
           {"f_ge", {Dim::frequency, true}}}},
         {"drive", {{"rabi", {Dim::frequency, true}}, {"detuning", {Dim::frequency}}, {"probe", {Dim::text}}}},
         {"grid", freq_grid()}},
        true}},
      {"fit",
       {{{"device", coupling_schema()},
         {"input", {{"trace", {Dim::text, true}}}},
         {"grid", freq_grid()},
         {"options", {{"fano", {Dim::flag}}, {"circle", {Dim::flag}}, {"background", {Dim::flag}}}}},
        true}},
      {"bound",
       {{{"device",
          {{"phase_var", {Dim::phase_var}},
           {"relative", {Dim::flag}},
           {"gamma_f", {Dim::frequency}},
           {"sigma_f", {Dim::frequency}},
           {"gamma_b", {Dim::frequency}},
           {"sigma_b", {Dim::frequency}},
           {"level", {Dim::number}}}}},
        false}},
      {"budget",
       {{{"device",
          {{"gamma_prime0", {Dim::frequency, true}},
           {"temperature", {Dim::temperature, true}},
           {"f0", {Dim::frequency, true}},
           {"hybridization", {Dim::frequency}},
           {"gamma_b", {Dim::frequency}}}},
         {"grid", freq_grid()}},
        false}},
  };
  return k;
}

struct Scenario {
  std::string kind;
  std::string name;
  std::optional<std::uint64_t> seed;
  std::optional<double> noise_sigma;
  std::map<std::string, Section> sections;
  std::string config_text;
  fs::path base_dir;

  bool has(const std::string& s) const { return sections.count(s) > 0; }
  const Section& section(const std::string& s) const {
    auto it = sections.find(s);
    if (it == sections.end()) throw ConfigError("section '" + s + "' missing");
    return it->second;
  }
};

namespace detail {

inline int line_of(const YAML::Node& n) { return n.Mark().line + 1; }

template <class T>
T scalar_as(const YAML::Node& n, const std::string& where) {
  if (!n.IsScalar()) throw ConfigError(where + ": expected a scalar" + at_line(line_of(n)));
  try {
    return n.as<T>();
  } catch (const YAML::Exception&) {
    throw ConfigError(where + ": cannot read '" + n.Scalar() + "'" + at_line(line_of(n)));
  }
}

inline Section parse_section(const std::string& name, const YAML::Node& node, const Schema& schema) {
  if (!node.IsMap()) throw ConfigError(name + ": expected a mapping" + at_line(line_of(node)));
  Section s;
  s.name = name;
  s.line = line_of(node);
  for (const auto& kv : node) {
    const std::string key = kv.first.as<std::string>();
    const int line = line_of(kv.first);
    const std::string where = name + "." + key;
    std::string base = key;
    const Unit* unit = nullptr;
    auto it = schema.find(key);
    if (it != schema.end() && has_units(it->second.dim))
      throw ConfigError(where + ": missing unit suffix, expected " + dim_name(it->second.dim) + at_line(line));
    if (it == schema.end()) {
      const auto us = key.rfind('_');
      if (us != std::string::npos) {
        const std::string suf = key.substr(us + 1);
        for (const auto& u : kUnits)
          if (suf == u.suffix) unit = &u;
        if (unit) base = key.substr(0, us);
      }
      it = schema.find(base);
      if (!unit || it == schema.end()) throw ConfigError(where + ": unknown key" + at_line(line));
      if (!has_units(it->second.dim))
        throw ConfigError(where + ": '" + base + "' takes no unit suffix" + at_line(line));
      if (unit->dim != it->second.dim)
        throw ConfigError(where + ": unit '_" + unit->suffix + "' does not match, expected " +
                          dim_name(it->second.dim) + at_line(line));
    }
    if (s.values.count(base)) throw ConfigError(where + ": '" + base + "' given twice" + at_line(line));
    Value v;
    v.dim = it->second.dim;
    v.key = key;
    v.line = line;
    switch (v.dim) {
      case Dim::integer: v.integer = scalar_as<long long>(kv.second, where); v.si = double(v.integer); break;
      case Dim::text: v.text = scalar_as<std::string>(kv.second, where); break;
      case Dim::flag: v.flag = scalar_as<bool>(kv.second, where); break;
      default: {
        v.si = scalar_as<double>(kv.second, where) * (unit ? unit->scale : 1.0);
        if (!std::isfinite(v.si)) throw ConfigError(where + ": must be finite" + at_line(line));
      }
    }
    s.values[base] = v;
  }
  for (const auto& [k, f] : schema)
    if (f.required && !s.values.count(k))
      throw ConfigError(name + "." + k + ": required field missing" + at_line(s.line));
  return s;
}

inline void exactly_one(const Section& s, const std::string& a, const std::string& b) {
  if (s.has(a) == s.has(b))
    throw ConfigError(s.name + ": give exactly one of '" + a + "' and '" + b + "'" + at_line(s.line));
}

inline void check_grid(const Section& g) {
  const auto& p = g.get("points");
  if (p.integer < 2) throw ConfigError("grid.points: need at least 2 points" + at_line(p.line));
  if (p.integer > 10'000'000) throw ConfigError("grid.points: too many points" + at_line(p.line));
  if (!(g.num("stop") > g.num("start")))
    throw ConfigError("grid.stop: must exceed grid.start" + at_line(g.get("stop").line));
}

inline void check_kind_rules(const Scenario& sc) {
  const std::string& k = sc.kind;
  if (sc.has("grid")) check_grid(sc.section("grid"));
  if (sc.has("drive") && (k == "sweep-strong" || k == "mollow" || k == "rabi"))
    exactly_one(sc.section("drive"), "rabi", "power");
  const bool needs_device = k != "fit" || !sc.has("input");
  if (needs_device && !sc.has("device")) throw ConfigError("section 'device' missing");
  if (kind_specs().at(k).sections.count("drive") && !sc.has("drive")) throw ConfigError("section 'drive' missing");
  if (k != "bound" && k != "fit" && !sc.has("grid")) throw ConfigError("section 'grid' missing");
  if (k == "sweep-weak" || (k == "fit" && sc.has("device"))) {
    const auto& d = sc.section("device");
    exactly_one(d, "phi_wg", "d");
    if (d.has("d") && !d.has("eps_eff")) throw ConfigError("device.eps_eff: required with device.d" + at_line(d.line));
  }
  if (k == "fit") {
    if (sc.has("input") == sc.has("device"))
      throw ConfigError("fit: give exactly one of 'input' (a trace file) and 'device' (synthetic)");
    if (sc.has("device") && !sc.has("grid")) throw ConfigError("section 'grid' missing");
    if (sc.has("input") && sc.has("grid")) throw ConfigError("fit: 'grid' only applies to synthetic traces");
    if (sc.has("input") && sc.noise_sigma)
      throw ConfigError("fit: 'noise' only applies to synthetic traces");
  }
  if (k == "rabi" && sc.section("drive").has("power") && !sc.section("device").has("f0"))
    throw ConfigError("device.f0: required to convert drive power" + at_line(sc.section("device").line));
  if (k == "two-tone") {
    const auto p = sc.section("drive").text_or("probe", "forward");
    if (p != "forward" && p != "backward")
      throw ConfigError("drive.probe: must be forward or backward" + at_line(sc.section("drive").get("probe").line));
  }
  if (k == "cmt") {
    const auto& d = sc.section("device");
    const auto preset = d.text_or("preset", "");
    if (!preset.empty() && preset != "device_right_port")
      throw ConfigError("device.preset: unknown preset '" + preset + "'" + at_line(d.get("preset").line));
    if (preset.empty())
      for (const char* f : {"f_e", "f_c", "f_r", "g_ec", "g_cr", "kappa_e", "kappa_t", "epsilon", "delta_mod"})
        if (!d.has(f)) throw ConfigError(std::string("device.") + f + ": required without a preset" + at_line(d.line));
    const auto ph = d.text_or("phase", "langevin");
    if (ph != "langevin" && ph != "printed")
      throw ConfigError("device.phase: must be langevin or printed" + at_line(d.get("phase").line));
  }
  if (k == "bound") {
    const auto& d = sc.section("device");
    const int n = d.has("gamma_f") + d.has("sigma_f") + d.has("gamma_b") + d.has("sigma_b");
    if (n != 0 && n != 4)
      throw ConfigError("device: gamma_f, sigma_f, gamma_b, sigma_b go together" + at_line(d.line));
    if (n == 0 && !d.has("phase_var"))
      throw ConfigError("device: need phase_var or the four fitted rates" + at_line(d.line));
  }
}

} // namespace detail

inline Scenario parse_scenario(const std::string& text, const fs::path& base_dir = {}) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError("yaml: " + e.msg + at_line(e.mark.line + 1));
  }
  if (!root.IsMap()) throw ConfigError("config must be a mapping at top level");
  Scenario sc;
  sc.config_text = text;
  sc.base_dir = base_dir;
  if (!root["kind"]) throw ConfigError("kind: required field missing (line 1)");
  sc.kind = detail::scalar_as<std::string>(root["kind"], "kind");
  const auto ks = kind_specs().find(sc.kind);
  if (ks == kind_specs().end())
    throw ConfigError("kind: unknown kind '" + sc.kind + "'" + at_line(detail::line_of(root["kind"])));
  sc.name = sc.kind;

  for (const auto& kv : root) {
    const std::string key = kv.first.as<std::string>();
    const int line = detail::line_of(kv.first);
    if (key == "kind") continue;
    if (key == "seed") {
      const auto s = detail::scalar_as<long long>(kv.second, "seed");
      if (s < 0) throw ConfigError("seed: must be >= 0" + at_line(line));
      sc.seed = static_cast<std::uint64_t>(s);
    } else if (key == "noise") {
      if (!ks->second.noise) throw ConfigError("noise: not supported for kind " + sc.kind + at_line(line));
      const auto s = detail::parse_section("noise", kv.second, {{"sigma", {Dim::number, true}}});
      if (!(s.num("sigma") >= 0)) throw ConfigError("noise.sigma: must be >= 0" + at_line(s.get("sigma").line));
      sc.noise_sigma = s.num("sigma");
    } else if (key == "output") {
      const auto s = detail::parse_section("output", kv.second, detail::output_schema());
      sc.name = s.text_or("name", sc.kind);
      if (sc.name.empty() || sc.name.find_first_of("/\\") != std::string::npos)
        throw ConfigError("output.name: must be a plain file stem" + at_line(line));
    } else {
      const auto sch = ks->second.sections.find(key);
      if (sch == ks->second.sections.end())
        throw ConfigError(key + ": unknown section for kind " + sc.kind + at_line(line));
      sc.sections[key] = detail::parse_section(key, kv.second, sch->second);
    }
  }
  if (sc.noise_sigma && !sc.seed) throw ConfigError("seed: required when noise is set");
  detail::check_kind_rules(sc);
  return sc;
}

inline Scenario load_scenario(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ConfigError("cannot open config " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str(), p.parent_path());
}

// ---------------------------------------------------------------- run

struct RunResult {
  std::vector<fs::path> files; // artifacts, manifest last
};

inline fs::path output_dir() {
  const char* e = std::getenv("CHIRAL_OUT_DIR");
  return e && *e ? fs::path(e) : fs::path("chiral_out");
}

namespace detail {

inline void write_file(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + p.string());
  out << s;
  if (!out) throw Error("write failed for " + p.string());
}

inline std::vector<double> grid_of(const Section& g, double scale = 1.0) {
  auto v = linspace(g.num("start"), g.num("stop"), static_cast<std::size_t>(g.get("points").integer));
  for (auto& x : v) x *= scale;
  return v;
}

inline AtomRates atom_rates(const Section& d) {
  return AtomRates(d.rate("gamma_f"), d.rate_or("gamma_b", 0), d.rate_or("gamma_prime", 0), d.rate_or("gamma_phi", 0));
}

inline double drive_rabi(const Section& drive, const Section& dev) {
  if (drive.has("rabi")) return drive.rate("rabi");
  return rabi_from_power(drive.num("power"), dev.rate("gamma_f"), dev.rate("f0"));
}

struct WeakSetup {
  ChiralCoupling c;
  AtomRates r;
  double f0;
};

inline WeakSetup weak_setup(const Section& d) {
  const double f0 = d.num("f0");
  const double phi_wg =
      d.has("phi_wg") ? d.num("phi_wg") : propagation_phase(WaveguideGeometry(d.num("d"), f0, d.num("eps_eff")));
  ChiralCoupling c(d.rate("kappa_em"), d.num("phi_c"), phi_wg);
  const auto dr = decay_rates(c);
  AtomRates r(dr.gamma_f, dr.gamma_b, d.rate_or("gamma_prime", 0), d.rate_or("gamma_phi", 0));
  return {c, r, f0};
}

inline SpectrumTrace weak_trace(const WeakSetup& w, const std::vector<double>& det_hz) {
  std::vector<double> f;
  std::vector<cplx> t;
  for (double x : det_hz) {
    f.push_back(w.f0 + x);
    t.push_back(weak_transmission(w.c, w.r, hz_to_rad(x)));
  }
  return SpectrumTrace(std::move(f), std::move(t));
}

inline SpectrumTrace maybe_noisy(const Scenario& sc, const SpectrumTrace& tr) {
  if (!sc.noise_sigma) return tr;
  return synthesize_noisy(tr, *sc.noise_sigma, *sc.seed);
}

inline std::string dump(const ojson& j) { return j.dump(2) + "\n"; }

inline SidebandModel sideband_model(const Section& d) {
  SidebandModel s;
  if (d.text_or("preset", "") == "device_right_port") s = device_right_port();
  auto set = [&](const char* k, double& dst) {
    if (d.has(k)) dst = d.rate(k);
  };
  set("f_e", s.omega_e);
  set("f_c", s.omega_c);
  set("f_r", s.omega_r);
  set("g_ec", s.g_ec);
  set("g_cr", s.g_cr);
  set("kappa_e", s.kappa_e);
  set("kappa_t", s.kappa_t);
  set("gamma_e", s.gamma_e);
  set("gamma_c", s.gamma_c);
  set("epsilon", s.epsilon);
  set("delta_mod", s.delta_mod);
  if (d.has("n_trunc")) s.n_trunc = static_cast<int>(d.get("n_trunc").integer);
  s.phase = d.text_or("phase", "langevin") == "printed" ? CouplingPhase::printed : CouplingPhase::langevin;
  return s;
}

} // namespace detail

// Writes <name>.* artifacts and <name>.manifest.json into out_dir.
inline RunResult run_scenario(const Scenario& sc, const fs::path& out_dir) {
  using namespace detail;
  const auto t_start = std::chrono::steady_clock::now();
  fs::create_directories(out_dir);
  RunResult res;
  auto emit = [&](const std::string& suffix, const std::string& body) {
    const fs::path p = out_dir / (sc.name + suffix);
    write_file(p, body);
    res.files.push_back(p);
  };
  const double s = 1.0 / constants::two_pi;

  if (sc.kind == "sweep-weak") {
    const auto w = weak_setup(sc.section("device"));
    const auto clean = weak_trace(w, grid_of(sc.section("grid")));
    emit(".csv", write_trace_csv(maybe_noisy(sc, clean)));
    ojson j;
    j["gamma_f_hz"] = json_number(w.r.gamma_f() * s);
    j["gamma_b_hz"] = json_number(w.r.gamma_b() * s);
    j["gamma_prime_hz"] = json_number(w.r.gamma_prime() * s);
    j["phi_wg_rad"] = json_number(w.c.phi_wg());
    j["eta_d"] = json_number(w.r.gamma_b() > 0 ? w.r.gamma_f() / w.r.gamma_b() : INFINITY);
    try {
      j["phase_winding_rad"] = json_number(phase_winding(clean));
    } catch (const WindingUndefinedError& e) {
      j["phase_winding_rad"] = nullptr;
      j["winding_note"] = e.what();
    }
    emit(".json", dump(j));
  } else if (sc.kind == "sweep-strong") {
    const auto& d = sc.section("device");
    const auto r = atom_rates(d);
    const double om = drive_rabi(sc.section("drive"), d);
    std::vector<double> f;
    std::vector<cplx> t;
    for (double x : grid_of(sc.section("grid"))) {
      f.push_back(d.num("f0") + x);
      t.push_back(transmission_strong({om, hz_to_rad(x), std::nullopt}, r.gamma_f(), r.gamma1(), r.gamma2()));
    }
    emit(".csv", write_trace_csv(maybe_noisy(sc, SpectrumTrace(f, t))));
  } else if (sc.kind == "mollow") {
    const auto& d = sc.section("device");
    const auto r = atom_rates(d);
    const double om = drive_rabi(sc.section("drive"), d);
    const MollowParams m(r.gamma1(), r.gamma2(), d.rate("f0"));
    const auto det = grid_of(sc.section("grid"));
    std::vector<double> dw;
    for (double x : det) dw.push_back(hz_to_rad(x));
    PsdTrace p;
    const auto psd = mollow_psd(m, r.gamma_f(), om, dw);
    for (std::size_t i = 0; i < det.size(); ++i) {
      p.freqs.push_back(d.num("f0") + det[i]);
      p.psd.push_back(psd[i] * constants::two_pi); // per Hz
    }
    emit(".csv", write_psd_csv(p));
    ojson j;
    j["rabi_hz"] = json_number(om * s);
    j["gamma1_hz"] = json_number(r.gamma1() * s);
    j["gamma2_hz"] = json_number(r.gamma2() * s);
    j["sideband_fwhm_hz"] = json_number((r.gamma1() + r.gamma2()) * s);
    j["incoherent_power_w"] = json_number(constants::hbar * m.omega0 * r.gamma_f() / 2.0);
    emit(".json", dump(j));
  } else if (sc.kind == "rabi") {
    const auto& d = sc.section("device");
    const auto r = atom_rates(d);
    const double om = drive_rabi(sc.section("drive"), d);
    const auto tau = grid_of(sc.section("grid"));
    const auto b = rabi_trace(tau, {om, 0.0, std::nullopt}, r.gamma1(), r.gamma2());
    Table t{{"time_s", "sx", "sz"}, {}};
    for (std::size_t i = 0; i < tau.size(); ++i) t.rows.push_back({tau[i], b.sx[i], b.sz[i]});
    emit(".csv", write_table(t));
  } else if (sc.kind == "cmt") {
    const auto m = sideband_model(sc.section("device"));
    const auto sp = cmt_transmission(m, grid_of(sc.section("grid"), constants::two_pi));
    emit(".csv", write_trace_csv(maybe_noisy(sc, sp.trace)));
    ojson j;
    j["n_trunc"] = m.n_trunc;
    j["phase"] = m.phase == CouplingPhase::printed ? "printed" : "langevin";
    j["bessel_weights"] = bessel_weights(m.epsilon, m.delta_mod, 3);
    j["singular_points"] = sp.singular;
    emit(".json", dump(j));
  } else if (sc.kind == "two-tone") {
    const auto& d = sc.section("device");
    const auto& dr = sc.section("drive");
    ThreeLevelPorts p;
    p.kappa_l = d.rate("kappa_l");
    p.kappa_r = d.rate("kappa_r");
    p.anharmonicity = d.rate("anharmonicity");
    p.ge_rates = atom_rates(d);
    p.phi_c = d.num_or("phi_c", constants::pi / 2);
    p.phi_wg_ef = d.num_or("phi_wg_ef", constants::pi / 2);
    p.gamma_prime_ef = d.rate_or("gamma_prime_ef", 0);
    if (d.has("gamma_phi_ef")) p.gamma_phi_ef = d.rate("gamma_phi_ef");
    p.omega_ge = d.rate("f_ge");
    const DriveSpec ge{dr.rate("rabi"), dr.rate_or("detuning", 0), std::nullopt};
    const auto dir = dr.text_or("probe", "forward") == "backward" ? Direction::backward : Direction::forward;
    const auto tr = two_tone_trace(p, ge, grid_of(sc.section("grid"), constants::two_pi), dir);
    emit(".csv", write_trace_csv(maybe_noisy(sc, tr)));
    const auto er = ef_rates(p);
    ojson j;
    j["gamma_f_ef_hz"] = json_number(er.gamma_f * s);
    j["gamma_b_ef_hz"] = json_number(er.gamma_b * s);
    j["eta_d_ef"] = json_number(er.eta_d);
    emit(".json", dump(j));
  } else if (sc.kind == "fit") {
    SpectrumTrace tr;
    if (sc.has("input")) {
      fs::path p = sc.section("input").get("trace").text;
      if (p.is_relative()) p = sc.base_dir / p;
      tr = read_trace_file(p);
    } else {
      tr = maybe_noisy(sc, weak_trace(weak_setup(sc.section("device")), grid_of(sc.section("grid"))));
      emit(".csv", write_trace_csv(tr));
    }
    Section none;
    const Section& o = sc.has("options") ? sc.section("options") : none;
    FitOptions opt;
    opt.background = o.flag_or("background", false);
    ojson j;
    if (o.flag_or("fano", true)) j["fano"] = fit_to_json(fit_fano(tr, std::nullopt, opt));
    if (o.flag_or("circle", true)) j["circle"] = fit_to_json(circle_fit(tr));
    if (j.is_null()) throw ConfigError("options: both fits disabled");
    emit("_fit.json", dump(j));
  } else if (sc.kind == "bound") {
    const auto& d = sc.section("device");
    ojson j;
    if (d.has("phase_var")) {
      const bool rel = d.flag_or("relative", false);
      j["phase_noise"] = {{"phase_var_rad2", json_number(d.num("phase_var"))},
                          {"relative", rel},
                          {"eta_d", json_number(phase_noise_bound(d.num("phase_var"), rel))}};
    }
    if (d.has("gamma_f")) {
      FitResult f, b;
      f.gamma_1d = d.rate("gamma_f");
      f.sigma_gamma_1d = d.rate("sigma_f");
      b.gamma_1d = d.rate("gamma_b");
      b.sigma_gamma_1d = d.rate("sigma_b");
      const double level = d.num_or("level", 0.95);
      const auto ci = directionality_ci(f, b, level);
      j["ratio"] = {{"level", level},
                    {"eta_d", json_number(ci.eta_d)},
                    {"ci_low", json_number(ci.ci_low)},
                    {"ci_high", json_number(ci.ci_high)},
                    {"one_sided", ci.one_sided}};
    }
    emit(".json", dump(j));
  } else if (sc.kind == "budget") {
    const auto& d = sc.section("device");
    const double n = thermal_occupation(ThermalBath(d.num("temperature"), d.num("f0")));
    const double gp0 = d.rate("gamma_prime0"), hyb = d.rate_or("hybridization", 0);
    const double gb = d.rate_or("gamma_b", 0);
    Table t{{"gamma_1d_hz", "gamma_prime_hz", "beta", "purcell"}, {}};
    for (double g : grid_of(sc.section("grid"), constants::two_pi)) {
      const double gp = thermal_gamma_prime({gp0, n, g, hyb});
      const AtomRates r(g, gb, gp);
      t.rows.push_back({g * s, gp * s, beta_factor(r), purcell_factor(r)});
    }
    emit(".csv", write_table(t));
    ojson j;
    j["n_th"] = json_number(n);
    j["purcell_ceiling"] = json_number(n > 0 ? 1.0 / (2.0 * n) : INFINITY);
    emit(".json", dump(j));
  } else {
    throw ConfigError("kind: unknown kind '" + sc.kind + "'");
  }

  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  ojson m;
  m["tool"] = "chiralsim";
  m["version"] = CHIRAL_VERSION;
  m["kind"] = sc.kind;
  m["config_sha256"] = sha256_hex(sc.config_text);
  m["seed"] = sc.seed ? ojson(*sc.seed) : ojson(nullptr);
  ojson files = ojson::array();
  for (const auto& f : res.files) files.push_back(f.filename().string());
  m["files"] = files;
  m["wall_time_s"] = wall;
  const fs::path mp = out_dir / (sc.name + ".manifest.json");
  write_file(mp, dump(m));
  res.files.push_back(mp);
  return res;
}

} // namespace chiral
