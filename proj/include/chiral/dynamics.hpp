#pragma once

#include <chiral/core.hpp>
#include <chiral/slh.hpp>
#include <chiral/trace.hpp>

#include <Eigen/Dense>
#include <Eigen/SVD>

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

namespace chiral {

struct BlochState {
  double sx = 0, sy = 0, sz = -1;
  double length() const { return std::sqrt(sx * sx + sy * sy + sz * sz); }
};

struct DriveSpec {
  double omega_r = 0;      // rad/s
  double delta_omega = 0;  // rad/s
  std::optional<double> p_in; // W
};

struct MollowParams {
  double gamma1, gamma2, gamma_s, omega0;

  MollowParams(double g1, double g2, double w0)
      : gamma1(g1), gamma2(g2), gamma_s((g1 + g2) / 2.0), omega0(w0) {}
};

// e-f transition of a transmon coupled at two ports. kappa_l, kappa_r are
// the e-f decay rates through each port. The e-f lowering operator carries
// the oscillator matrix element sqrt(2); per-port amplitudes are quoted in
// ladder units so the rates come out as kappa.
struct ThreeLevelPorts {
  double kappa_l = 0, kappa_r = 0;
  double anharmonicity = 0;       // omega_ge - omega_ef
  AtomRates ge_rates{0, 0, 0, 0};
  double phi_c = constants::pi / 2;
  double phi_wg_ef = constants::pi / 2; // propagation phase at omega_ef
  double gamma_prime_ef = 0;     // intrinsic e-f loss
  std::optional<double> gamma_phi_ef; // defaults to ge value
  double omega_ge = 0;           // only used to label output frequencies
};

inline BlochState bloch_steady_state(const DriveSpec& d, double gamma1, double gamma2) {
  if (!(gamma1 > 0 && gamma2 > 0)) throw DomainError("gamma1, gamma2 must be > 0");
  const double om = d.omega_r, dw = d.delta_omega;
  const double den = gamma1 * (gamma2 * gamma2 + dw * dw) + gamma2 * om * om;
  return {-gamma1 * gamma2 * om / den, -gamma1 * dw * om / den, -1.0 + gamma2 * om * om / den};
}

inline cplx transmission_strong(const DriveSpec& d, double gamma_f, double gamma1, double gamma2) {
  const double om = d.omega_r, dw = d.delta_omega;
  const double den = om * om * gamma2 + gamma1 * (dw * dw + gamma2 * gamma2);
  return 1.0 - gamma_f * gamma1 * cplx(gamma2, -dw) / den;
}

struct MollowComponents {
  std::vector<double> lower, centre, upper;
  std::vector<double> total() const {
    std::vector<double> t(centre.size());
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = lower[i] + centre[i] + upper[i];
    return t;
  }
};

// Incoherent emission PSD per unit angular frequency (W s / rad).
inline MollowComponents mollow_components(const MollowParams& m, double gamma_f, double omega_r,
                                          const std::vector<double>& dw) {
  const double pref = constants::hbar * m.omega0 * gamma_f / 4.0 / constants::two_pi;
  const double gs = m.gamma_s, g2 = m.gamma2;
  MollowComponents c;
  for (double x : dw) {
    c.lower.push_back(pref * gs / ((x + omega_r) * (x + omega_r) + gs * gs));
    c.centre.push_back(pref * 2.0 * g2 / (x * x + g2 * g2));
    c.upper.push_back(pref * gs / ((x - omega_r) * (x - omega_r) + gs * gs));
  }
  return c;
}

inline std::vector<double> mollow_psd(const MollowParams& m, double gamma_f, double omega_r,
                                      const std::vector<double>& dw) {
  return mollow_components(m, gamma_f, omega_r, dw).total();
}

inline double rabi_from_power(double p_in, double gamma_f, double omega_ge) {
  if (p_in < 0 || gamma_f < 0 || !(omega_ge > 0)) throw DomainError("rabi_from_power: bad inputs");
  return std::sqrt(4.0 * p_in * gamma_f / (constants::hbar * omega_ge));
}

struct BlochTrace {
  std::vector<double> sx, sz;
};

// Resonant Rabi oscillation from the ground state. The drive sense here
// makes sx rise initially, so sx -> +x_inf.
inline BlochTrace rabi_trace(const std::vector<double>& tau, const DriveSpec& d, double gamma1,
                             double gamma2) {
  if (d.delta_omega != 0.0) throw RegimeError("rabi_trace needs a resonant drive");
  const double om = d.omega_r;
  const double half = (gamma1 - gamma2) / 2.0;
  if (om * om <= half * half) throw RegimeError("overdamped Rabi regime (omega_r <= |g1-g2|/2)");
  const double gr = (gamma1 + gamma2) / 2.0;
  const double nu = std::sqrt(om * om - half * half);
  const double x_inf = gamma1 * om / (gamma1 * gamma2 + om * om);
  const double z_inf = -gamma1 * gamma2 / (gamma1 * gamma2 + om * om);
  BlochTrace out;
  for (double t : tau) {
    const double e = std::exp(-gr * t), s = std::sin(nu * t), c = std::cos(nu * t);
    out.sx.push_back(x_inf - ((gr * x_inf - om) / nu * s + x_inf * c) * e);
    out.sz.push_back(z_inf - (1.0 + z_inf) * (c + gr / nu * s) * e);
  }
  return out;
}

inline BlochTrace ring_down(const BlochState& s0, const std::vector<double>& t, double gamma1,
                            double gamma2) {
  BlochTrace out;
  for (double x : t) {
    out.sx.push_back(s0.sx * std::exp(-gamma2 * x));
    out.sz.push_back((1.0 + s0.sz) * std::exp(-gamma1 * x) - 1.0);
  }
  return out;
}

struct Dissipator {
  double rate;
  Operator op;
};

namespace detail {

inline Eigen::MatrixXcd kron(const Eigen::MatrixXcd& a, const Eigen::MatrixXcd& b) {
  Eigen::MatrixXcd out(a.rows() * b.rows(), a.cols() * b.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

} // namespace detail

// Column-stacking vectorisation: vec(A X B) = (B^T kron A) vec(X).
inline Eigen::MatrixXcd liouvillian(const Operator& h, const std::vector<Dissipator>& ds) {
  const auto d = h.rows();
  const Eigen::MatrixXcd id = Eigen::MatrixXcd::Identity(d, d);
  const cplx i(0, 1);
  Eigen::MatrixXcd l = -i * (detail::kron(id, h) - detail::kron(h.transpose(), id));
  for (const auto& di : ds) {
    const Operator& x = di.op;
    const Operator xdx = x.adjoint() * x;
    l += di.rate * (detail::kron(x.conjugate(), x) - 0.5 * detail::kron(id, xdx) -
                    0.5 * detail::kron(xdx.transpose(), id));
  }
  return l;
}

inline Operator lindblad_steady_state(const Operator& h, const std::vector<Dissipator>& ds) {
  const auto d = h.rows();
  if (d < 1 || d > 4 || h.cols() != d) throw DomainError("lindblad: dimension must be 1..4");
  if (ds.empty()) throw DomainError("lindblad: need at least one dissipator");
  for (const auto& di : ds) {
    if (di.op.rows() != d || di.op.cols() != d) throw DomainError("lindblad: operator size mismatch");
    if (di.rate < 0) throw DomainError("lindblad: negative rate");
  }

  const Eigen::MatrixXcd l = liouvillian(h, ds);
  Eigen::JacobiSVD<Eigen::MatrixXcd> svd(l, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  const auto n = sv.size();
  const double scale = sv(0);
  if (scale == 0.0) throw MultiplicityError("Liouvillian vanishes");
  if (n >= 2 && sv(n - 2) < 1e-10 * scale)
    throw MultiplicityError("steady state is not unique");

  Eigen::VectorXcd v = svd.matrixV().col(n - 1);
  Operator rho = Eigen::Map<Eigen::MatrixXcd>(v.data(), d, d);
  rho /= rho.trace();
  rho = (rho + rho.adjoint()) / 2.0;

  Eigen::VectorXcd vr = Eigen::Map<Eigen::VectorXcd>(rho.data(), d * d);
  if ((l * vr).norm() > 1e-10 * scale) throw SolverError("steady-state residual too large");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(rho);
  if (es.eigenvalues().minCoeff() < -1e-10) throw SolverError("steady state is not positive");
  return rho;
}

inline BlochState bloch_from_density(const Operator& rho) {
  return {std::real((rho * op::sigma_x()).trace()), std::real((rho * op::sigma_y()).trace()),
          std::real((rho * op::sigma_z()).trace())};
}

// Master-equation counterpart of bloch_steady_state.
inline std::pair<Operator, std::vector<Dissipator>> driven_two_level(const DriveSpec& d,
                                                                    double gamma1, double gamma_phi) {
  Operator h = d.delta_omega / 2.0 * op::sigma_z() + d.omega_r / 2.0 * op::sigma_y();
  std::vector<Dissipator> ds{{gamma1, op::sigma_minus()}};
  if (gamma_phi > 0) ds.push_back({gamma_phi / 2.0, op::sigma_z()});
  return {h, ds};
}

struct EfRates {
  double gamma_f, gamma_b, eta_d;
};

inline EfRates ef_rates(const ThreeLevelPorts& p) {
  if (p.kappa_l < 0 || p.kappa_r < 0) throw DomainError("ef_rates: kappa must be >= 0");
  const double mean = (p.kappa_l + p.kappa_r) / 2.0;
  const double g = std::sqrt(p.kappa_l * p.kappa_r);
  const double f = mean + g;
  const double b = std::max(0.0, mean - g);
  const double eta = b == 0.0 ? std::numeric_limits<double>::infinity() : f / b;
  return {f, b, eta};
}

// Port rates reproducing a given forward/backward pair.
inline std::pair<double, double> ports_from_ef_rates(double gamma_f, double gamma_b) {
  if (gamma_b < 0 || gamma_f < gamma_b) throw DomainError("need gamma_f >= gamma_b >= 0");
  const double a = std::sqrt(2.0 * gamma_f), b = std::sqrt(2.0 * gamma_b);
  const double sl = (a + b) / 2.0, sr = (a - b) / 2.0;
  return {sl * sl, sr * sr};
}

enum class Direction { forward, backward };

// Weak e-f probe transmission with a continuous g-e drive, from the
// three-level steady state. probe_dw are probe detunings from omega_ef in
// the same sign convention as DriveSpec::delta_omega.
inline SpectrumTrace two_tone_trace(const ThreeLevelPorts& p, const DriveSpec& ge_drive,
                                    const std::vector<double>& probe_dw,
                                    Direction dir = Direction::forward) {
  using detail::expi;
  const cplx i(0, 1);
  const double ql = std::sqrt(p.kappa_l / 4.0), qr = std::sqrt(p.kappa_r / 4.0);
  const cplx a_f = ql * expi(p.phi_wg_ef) + qr * expi(p.phi_c);
  const cplx a_b = ql + qr * expi(p.phi_wg_ef + p.phi_c);
  const cplx a = dir == Direction::forward ? a_f : a_b;

  const Operator s_ge = op::ket_bra(3, 0, 1);
  const Operator s_ef = std::sqrt(2.0) * op::ket_bra(3, 1, 2);
  const Operator l_probe = a * s_ef;

  const double gef_tot = std::norm(a_f) * 2.0 + std::norm(a_b) * 2.0 + p.gamma_prime_ef;
  const double gphi_ge = p.ge_rates.gamma_phi();
  const double gphi_ef = p.gamma_phi_ef.value_or(gphi_ge);
  Operator deph = op::zero(3);
  deph(1, 1) = std::sqrt(2.0 * gphi_ge);
  deph(2, 2) = deph(1, 1) + std::sqrt(2.0 * gphi_ef);

  std::vector<Dissipator> ds{{p.ge_rates.gamma1(), s_ge}, {gef_tot / 2.0, s_ef}};
  if (gphi_ge > 0 || gphi_ef > 0) ds.push_back({1.0, deph});

  // probe Rabi frequency three orders below the e-f linewidth
  const double scale = std::max(gef_tot, 1e-300);
  const double beta = 1e-3 * scale / std::max(std::abs(a) * std::sqrt(2.0), 1e-300) / 2.0;

  Operator h0 = op::zero(3);
  h0(0, 1) = i * ge_drive.omega_r / 2.0;
  h0(1, 0) = -i * ge_drive.omega_r / 2.0;
  const Operator h_probe = -i * (beta * l_probe.adjoint() - beta * l_probe);

  std::vector<double> freqs;
  std::vector<cplx> t;
  const double f_ef = rad_to_hz(p.omega_ge - p.anharmonicity);
  for (double dw : probe_dw) {
    Operator h = h0 + h_probe;
    h(1, 1) += ge_drive.delta_omega;
    h(2, 2) += ge_drive.delta_omega + dw;
    const Operator rho = lindblad_steady_state(h, ds);
    const cplx ef = (rho * l_probe).trace();
    freqs.push_back(f_ef + rad_to_hz(dw));
    t.push_back(1.0 + ef / beta);
  }
  return SpectrumTrace(freqs, t);
}

} // namespace chiral
