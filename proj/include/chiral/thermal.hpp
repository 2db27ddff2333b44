#pragma once

#include <chiral/core.hpp>
#include <chiral/fit.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <vector>

namespace chiral {

// Rates in rad/s. Gamma_2^th ~ Gamma_1^th / 2 is assumed inside the
// thermal enhancement below.
struct DecoherenceBudget {
  double gamma_prime0 = 0;
  double n_th = 0;
  double gamma_1d = 0;
  double hybridization_term = 0;

  void validate() const {
    if (gamma_prime0 < 0 || n_th < 0 || gamma_1d < 0 || hybridization_term < 0)
      throw DomainError("decoherence budget entries must be >= 0");
  }
};

// Gamma' = 2 n (Gamma_1D + Gamma'_0) + Gamma'_0 + hybridization
inline double thermal_gamma_prime(const DecoherenceBudget& b) {
  b.validate();
  return 2.0 * b.n_th * (b.gamma_1d + b.gamma_prime0) + b.gamma_prime0 + b.hybridization_term;
}

inline double beta_factor(const AtomRates& r) {
  const double d = r.gamma_f() + r.gamma_b() + r.gamma_prime();
  if (!(d > 0)) throw DomainError("beta: all rates zero");
  return r.gamma_f() / d;
}

inline double purcell_factor(const AtomRates& r) {
  if (r.gamma_prime() == 0.0) return std::numeric_limits<double>::infinity();
  return r.gamma_f() / r.gamma_prime();
}

inline double purcell_from_beta(double beta) {
  if (!(beta >= 0 && beta <= 1)) throw DomainError("beta must be in [0, 1]");
  if (beta == 1.0) return std::numeric_limits<double>::infinity();
  return beta / (1.0 - beta);
}

// Purcell factor along a Gamma_1D sweep with Gamma' from the thermal model.
inline std::vector<double> purcell_curve(const std::vector<double>& gamma_1d, double gamma_prime0,
                                         double n_th, double hybridization = 0.0) {
  std::vector<double> out;
  out.reserve(gamma_1d.size());
  for (double g : gamma_1d) {
    const double gp = thermal_gamma_prime({gamma_prime0, n_th, g, hybridization});
    out.push_back(gp > 0 ? g / gp : std::numeric_limits<double>::infinity());
  }
  return out;
}

struct ThermalSample {
  double gamma_1d;           // rad/s
  double gamma_prime;        // measured, rad/s
  double hybridization = 0;  // coupler-induced part at this point, rad/s
};

enum class HybridizationOrder {
  subtract_first, // remove the known hybridization term, then fit (T, Gamma'_0)
  joint           // fit (T, Gamma'_0, s) with s scaling the hybridization terms
};

struct ThermalFit {
  double temperature = 0, sigma_temperature = 0; // K
  double gamma_prime0 = 0, sigma_gamma_prime0 = 0;
  double n_th = 0, sigma_n_th = 0;
  double hybridization_scale = 1, sigma_hybridization_scale = 0;
  bool identifiable = true; // false when the normal matrix is numerically singular
};

inline ThermalFit fit_waveguide_temperature(const std::vector<ThermalSample>& data, double frequency_hz,
                                            HybridizationOrder order = HybridizationOrder::subtract_first) {
  const int np = order == HybridizationOrder::joint ? 3 : 2;
  const int n = static_cast<int>(data.size());
  if (n <= np) throw FitError("thermal fit: not enough samples");
  double scale = 0;
  for (const auto& d : data) scale = std::max(scale, std::abs(d.gamma_prime));
  if (!(scale > 0)) throw FitError("thermal fit: all rates zero");

  // p = (n_th, Gamma'_0 / scale[, s])
  auto fn = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r, Eigen::MatrixXd& j) {
    r.resize(n);
    j.resize(n, np);
    for (int k = 0; k < n; ++k) {
      const double g = data[k].gamma_1d / scale;
      const double h = data[k].hybridization / scale;
      const double meas = data[k].gamma_prime / scale;
      double model = 2 * p(0) * (g + p(1)) + p(1);
      if (np == 3) model += p(2) * h;
      const double target = np == 3 ? meas : meas - h;
      r(k) = model - target;
      j(k, 0) = 2 * (g + p(1));
      j(k, 1) = 2 * p(0) + 1;
      if (np == 3) j(k, 2) = h;
    }
  };
  Eigen::VectorXd p0(np);
  double gmin = data[0].gamma_prime;
  for (const auto& d : data) gmin = std::min(gmin, d.gamma_prime - (np == 3 ? 0.0 : d.hybridization));
  p0(0) = 0.01;
  p0(1) = std::max(gmin, 0.0) / scale;
  if (np == 3) p0(2) = 1.0;
  auto lm = detail::levenberg_marquardt(fn, p0, 200, 1e-12);
  if (!lm.converged) throw FitError("thermal fit: no convergence");
  const Eigen::MatrixXd jtj = lm.jac.transpose() * lm.jac;
  Eigen::MatrixXd cov = detail::pinv(jtj) * (lm.r.squaredNorm() / std::max(n - np, 1));
  const auto sv = Eigen::JacobiSVD<Eigen::MatrixXd>(jtj).singularValues();

  ThermalFit out;
  out.identifiable = sv(np - 1) > 1e-10 * sv(0);
  out.n_th = lm.p(0);
  out.sigma_n_th = std::sqrt(std::max(cov(0, 0), 0.0));
  out.gamma_prime0 = lm.p(1) * scale;
  out.sigma_gamma_prime0 = std::sqrt(std::max(cov(1, 1), 0.0)) * scale;
  if (np == 3) {
    out.hybridization_scale = lm.p(2);
    out.sigma_hybridization_scale = std::sqrt(std::max(cov(2, 2), 0.0));
  }
  if (out.n_th > 0) {
    out.temperature = temperature_from_occupation(out.n_th, frequency_hz);
    // dT/dn = T^2 k_b / (h f) * 1 / (n (n + 1))
    const double x = constants::h * frequency_hz / constants::k_b;
    const double dtdn = out.temperature * out.temperature / x / (out.n_th * (out.n_th + 1));
    out.sigma_temperature = dtdn * out.sigma_n_th;
  }
  return out;
}

} // namespace chiral
