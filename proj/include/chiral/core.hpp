#pragma once

#include <chiral/constants.hpp>
#include <chiral/errors.hpp>

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <string>

namespace chiral {

inline double wrap_phase(double phi) {
  double r = std::fmod(phi, constants::two_pi);
  if (r < 0.0) r += constants::two_pi;
  // fmod can land exactly on 2pi after the shift
  if (r >= constants::two_pi) r = 0.0;
  return r;
}

// Shortest signed distance a - b on the circle.
inline double circular_distance(double a, double b) {
  double d = std::remainder(a - b, constants::two_pi);
  return d;
}

class ChiralCoupling {
public:
  ChiralCoupling(double kappa_em, double phi_c, double phi_wg)
      : kappa_em_(kappa_em), phi_c_(wrap_phase(phi_c)), phi_wg_(wrap_phase(phi_wg)) {
    if (!(kappa_em >= 0.0) || !std::isfinite(kappa_em))
      throw DomainError("kappa_em must be finite and >= 0");
  }
  double kappa_em() const { return kappa_em_; }
  double phi_c() const { return phi_c_; }
  double phi_wg() const { return phi_wg_; }

private:
  double kappa_em_;
  double phi_c_;
  double phi_wg_;
};

struct WaveguideGeometry {
  double d;       // m
  double f;       // Hz
  double eps_eff;

  WaveguideGeometry(double d_, double f_, double eps)
      : d(d_), f(f_), eps_eff(eps) {
    if (!(d_ >= 0.0)) throw DomainError("d must be >= 0");
    if (!(eps >= 1.0)) throw DomainError("eps_eff must be >= 1");
  }
};

struct DecayRates {
  double gamma_f;
  double gamma_b;
};

// Angular rates throughout.
class AtomRates {
public:
  AtomRates(double gamma_f, double gamma_b, double gamma_prime, double gamma_phi = 0.0)
      : gf_(gamma_f), gb_(gamma_b), gp_(gamma_prime), gphi_(gamma_phi) {
    if (gf_ < 0 || gb_ < 0 || gp_ < 0 || gphi_ < 0)
      throw DomainError("atom rates must be >= 0");
    if (gp_ - 2.0 * gphi_ < -1e-12 * std::max(1.0, gp_))
      throw DomainError("gamma_prime must be >= 2 gamma_phi");
  }
  double gamma_f() const { return gf_; }
  double gamma_b() const { return gb_; }
  double gamma_prime() const { return gp_; }
  double gamma_phi() const { return gphi_; }

  double gamma_tot() const { return gf_ + gb_ + gp_; }
  double gamma_loss() const { return std::max(0.0, gp_ - 2.0 * gphi_); }
  double gamma1() const { return gf_ + gb_ + gamma_loss(); }
  double gamma2() const { return gamma1() / 2.0 + gphi_; }

private:
  double gf_, gb_, gp_, gphi_;
};

struct FluxCalibration {
  Eigen::Matrix3d m; // pH, rows/cols: left coupler, emitter, right coupler

  explicit FluxCalibration(const Eigen::Matrix3d& m_ph) : m(m_ph) {
    for (int i = 0; i < 3; ++i)
      if (!(m(i, i) > 0.0)) throw CalibrationError("diagonal mutual inductance must be > 0");
  }
};

struct ThermalBath {
  double temperature; // K
  double frequency;   // Hz

  ThermalBath(double t, double f) : temperature(t), frequency(f) {
    if (!(t >= 0.0)) throw DomainError("temperature must be >= 0");
  }
};

inline DecayRates decay_rates(const ChiralCoupling& c) {
  const double k = c.kappa_em();
  return {k * (1.0 + std::cos(c.phi_c() - c.phi_wg())),
          k * (1.0 + std::cos(c.phi_c() + c.phi_wg()))};
}

inline double propagation_phase(const WaveguideGeometry& g) {
  const double phi = constants::two_pi * g.d * g.f * std::sqrt(g.eps_eff) / constants::c0;
  return wrap_phase(phi);
}

inline double thermal_occupation(const ThermalBath& b) {
  if (b.temperature == 0.0) return 0.0;
  const double x = constants::hbar * constants::two_pi * b.frequency /
                   (constants::k_b * b.temperature);
  return 1.0 / std::expm1(x);
}

// Inverse Bose-Einstein: temperature giving occupation n at frequency f.
inline double temperature_from_occupation(double n, double f) {
  if (n <= 0.0) return 0.0;
  return constants::hbar * constants::two_pi * f / (constants::k_b * std::log1p(1.0 / n));
}

// fluxes in Wb, returns currents in A
inline Eigen::Vector3d flux_correction(const FluxCalibration& cal,
                                       const Eigen::Vector3d& target_fluxes) {
  const Eigen::Matrix3d mh = cal.m * 1e-12;
  Eigen::FullPivLU<Eigen::Matrix3d> lu(mh);
  lu.setThreshold(1e-10);
  if (!lu.isInvertible()) throw CalibrationError("cross-inductance matrix is singular");
  return lu.solve(target_fluxes);
}

} // namespace chiral
