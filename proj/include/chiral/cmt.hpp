#pragma once

#include <chiral/constants.hpp>
#include <chiral/errors.hpp>
#include <chiral/trace.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <string>
#include <vector>

namespace chiral {

// J_0 .. J_max of x by Miller's downward recurrence, normalised with
// J_0 + 2 sum J_2k = 1.
inline std::vector<double> bessel_j_series(double x, int max_order) {
  if (max_order < 0) throw DomainError("bessel: max_order must be >= 0");
  std::vector<double> out(max_order + 1, 0.0);
  if (x == 0.0) {
    out[0] = 1.0;
    return out;
  }
  const double ax = std::abs(x);
  const int start = 2 * ((std::max(max_order, static_cast<int>(ax)) + 20 +
                          static_cast<int>(std::sqrt(40.0 * (ax + 1.0)))) / 2);
  std::vector<double> j(start + 2, 0.0);
  j[start + 1] = 0.0;
  j[start] = 1e-300;
  for (int k = start; k > 0; --k) {
    j[k - 1] = 2.0 * k / ax * j[k] - j[k + 1];
    if (std::abs(j[k - 1]) > 1e250) {
      for (int i = k - 1; i <= start; ++i) j[i] *= 1e-250;
    }
  }
  double norm = j[0];
  for (int k = 2; k <= start; k += 2) norm += 2.0 * j[k];
  for (int n = 0; n <= max_order; ++n) {
    out[n] = j[n] / norm;
    if (x < 0 && (n % 2)) out[n] = -out[n];
  }
  return out;
}

// J_n for any integer n, J_{-n} = (-1)^n J_n.
inline double bessel_j(int n, double x) {
  const int k = std::abs(n);
  const double v = bessel_j_series(x, k)[k];
  return (n < 0 && (k % 2)) ? -v : v;
}

inline std::vector<double> bessel_weights(double epsilon, double delta_mod, int max_order) {
  if (!(delta_mod > 0)) throw DomainError("bessel_weights: delta_mod must be > 0");
  return bessel_j_series(epsilon / delta_mod, max_order);
}

// Phase attached to a sideband coupling of block distance k.
//  langevin: X_p <- C_q carries (-i)^k, C_p <- X_q carries i^k (from the
//            frequency-domain equations, even in p - q).
//  printed:  upper block -(i)^k G, lower block its conjugate.
enum class CouplingPhase { langevin, printed };

struct SidebandModel {
  double omega_e = 0, omega_c = 0, omega_r = 0; // rad/s
  double g_ec = 0, g_cr = 0;
  double kappa_e = 0, kappa_t = 0;
  double gamma_e = 0, gamma_c = 0;
  double epsilon = 0, delta_mod = 1;
  int n_trunc = 2;
  CouplingPhase phase = CouplingPhase::langevin;

  void validate() const {
    if (!(kappa_e >= 0) || !(kappa_t >= kappa_e))
      throw DomainError("cmt: need kappa_t >= kappa_e >= 0");
    if (gamma_e < 0 || gamma_c < 0) throw DomainError("cmt: internal losses must be >= 0");
    if (!(delta_mod > 0)) throw DomainError("cmt: delta_mod must be > 0");
    if (n_trunc < 0) throw TruncationError("cmt: n_trunc must be >= 0");
    if (n_trunc > 64) throw TruncationError("cmt: n_trunc above 64");
  }
};

enum Mode : int { kE = 0, kC = 1, kR = 2 };

struct BlockMatrix {
  int order = 0;
  Eigen::MatrixXcd m; // 3(2N+1) square, block p = -N..N, mode order E, C, R

  int blocks() const { return 2 * order + 1; }
  static int index(int order, int p, int mode) { return 3 * (p + order) + mode; }
  int index(int p, int mode) const { return index(order, p, mode); }
  Eigen::Matrix3cd block(int p, int q) const {
    return m.block<3, 3>(3 * (p + order), 3 * (q + order));
  }
};

namespace detail {

inline cplx ipow(int k) {
  static const cplx v[4] = {{1, 0}, {0, 1}, {-1, 0}, {0, -1}};
  return v[((k % 4) + 4) % 4];
}

} // namespace detail

inline BlockMatrix build_blocks(const SidebandModel& s, double omega) {
  s.validate();
  const int n = s.n_trunc;
  const auto jw = bessel_weights(s.epsilon, s.delta_mod, 2 * n);
  BlockMatrix b;
  b.order = n;
  b.m = Eigen::MatrixXcd::Zero(3 * (2 * n + 1), 3 * (2 * n + 1));
  const cplx i(0, 1);
  for (int p = -n; p <= n; ++p) {
    const double shift = omega + p * s.delta_mod;
    b.m(b.index(p, kE), b.index(p, kE)) = shift - s.omega_e + i * s.gamma_e / 2.0;
    b.m(b.index(p, kC), b.index(p, kC)) = shift - s.omega_c + i * s.gamma_c / 2.0;
    b.m(b.index(p, kR), b.index(p, kR)) = shift - s.omega_r + i * s.kappa_t / 2.0;
  }
  for (int p = -n; p <= n; ++p) {
    for (int q = -n; q <= n; ++q) {
      const int k = std::abs(p - q);
      const double j = jw[k];
      if (j == 0.0) continue;
      cplx to_c, from_c; // X_p <- C_q and C_p <- X_q
      if (s.phase == CouplingPhase::langevin) {
        to_c = detail::ipow(-k);
        from_c = detail::ipow(k);
      } else {
        to_c = from_c = q >= p ? detail::ipow(k) : detail::ipow(-k);
      }
      b.m(b.index(p, kE), b.index(q, kC)) = -s.g_ec * j * to_c;
      b.m(b.index(p, kR), b.index(q, kC)) = -s.g_cr * j * to_c;
      b.m(b.index(p, kC), b.index(q, kE)) = -s.g_ec * j * from_c;
      b.m(b.index(p, kC), b.index(q, kR)) = -s.g_cr * j * from_c;
    }
  }
  return b;
}

struct CmtPoint {
  cplx t;
  bool singular;
};

// Only the filter-cavity baseband is driven; a_out = a_in - sqrt(k_e/2) a_R0.
inline CmtPoint cmt_point(const SidebandModel& s, double omega, double rcond_min = 1e-13) {
  const BlockMatrix b = build_blocks(s, omega);
  const int r0 = b.index(0, kR);
  Eigen::PartialPivLU<Eigen::MatrixXcd> lu(b.m);
  const auto piv = lu.matrixLU().diagonal().cwiseAbs();
  const double rc = std::min(lu.rcond(), piv.minCoeff() / piv.maxCoeff());
  if (!(rc > rcond_min)) return {cplx(std::nan(""), std::nan("")), true};
  Eigen::VectorXcd rhs = Eigen::VectorXcd::Zero(b.m.rows());
  rhs(r0) = cplx(0, 1) * std::sqrt(s.kappa_e / 2.0);
  const Eigen::VectorXcd a = lu.solve(rhs);
  return {1.0 - std::sqrt(s.kappa_e / 2.0) * a(r0), false};
}

struct CmtSpectrum {
  SpectrumTrace trace;               // freqs in Hz
  std::vector<std::size_t> singular; // indices with NaN t
};

// omega_grid in rad/s
inline CmtSpectrum cmt_transmission(const SidebandModel& s, const std::vector<double>& omega_grid) {
  s.validate();
  CmtSpectrum out;
  std::vector<double> f(omega_grid.size());
  std::vector<cplx> t(omega_grid.size());
  for (std::size_t k = 0; k < omega_grid.size(); ++k) {
    f[k] = omega_grid[k] / constants::two_pi;
    const auto p = cmt_point(s, omega_grid[k]);
    t[k] = p.t;
    if (p.singular) out.singular.push_back(k);
  }
  out.trace = SpectrumTrace(std::move(f), std::move(t));
  return out;
}

inline double max_abs_difference(const SpectrumTrace& a, const SpectrumTrace& b) {
  double d = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double v = std::abs(a.t[k] - b.t[k]);
    if (std::isfinite(v)) d = std::max(d, v);
  }
  return d;
}

// Smallest N >= s.n_trunc with max |t_N - t_{N+1}| < tol over the grid.
inline int auto_truncation(const SidebandModel& s, const std::vector<double>& omega_grid,
                           double tol = 1e-3, int max_order = 12) {
  SidebandModel m = s;
  for (int n = s.n_trunc; n < max_order; ++n) {
    m.n_trunc = n;
    const auto a = cmt_transmission(m, omega_grid);
    m.n_trunc = n + 1;
    const auto b = cmt_transmission(m, omega_grid);
    if (max_abs_difference(a.trace, b.trace) < tol) return n;
  }
  throw TruncationError("cmt: truncation did not converge below order " + std::to_string(max_order));
}

enum class Regime { dispersive, hybridized, fully_hybridized };

struct RegimeEstimate {
  Regime regime;
  double g_eff = 0;
  double kappa_em = 0;
  double zeta = 0, xi = 0, alpha = 0; // participations where defined
  double omega_h = 0;                 // hybrid mode frequency, rad/s
  bool reliable = true;
  std::string warning;
};

// Decay path E_n -> C_m -> R_0. "much greater" is read as a factor 3.
inline RegimeEstimate regime_estimate(const SidebandModel& s, int n, int mm, Regime regime) {
  s.validate();
  constexpr double much = 3.0;
  const double x = s.epsilon / s.delta_mod;
  const double j_mn = bessel_j(mm - n, x);
  const double j_m = bessel_j(mm, x);
  const double w_en = s.omega_e + n * s.delta_mod;
  const double w_cm = s.omega_c + mm * s.delta_mod;
  const double w_r = s.omega_r;
  const double g1 = s.g_ec * j_mn; // E_n - C_m
  const double g2 = s.g_cr * j_m;  // C_m - R_0

  RegimeEstimate e;
  e.regime = regime;
  auto warn = [&](const std::string& w) {
    e.reliable = false;
    e.warning += e.warning.empty() ? w : "; " + w;
  };

  if (regime == Regime::dispersive) {
    const double d_ce = w_cm - w_en, d_cr = w_cm - w_r, d_er = w_en - w_r;
    e.g_eff = s.g_ec * s.g_cr / 2.0 * j_mn * j_m * (1.0 / d_ce + 1.0 / d_cr);
    e.kappa_em = std::pow(e.g_eff / d_er, 2) * s.kappa_e;
    if (std::abs(d_ce) < much * std::abs(g1)) warn("coupler not detuned from emitter");
    if (std::abs(d_cr) < much * std::abs(g2)) warn("coupler not detuned from cavity");
    if (std::abs(d_er) < much * std::abs(e.g_eff)) warn("emitter not detuned from cavity");
    return e;
  }

  if (regime == Regime::hybridized) {
    Eigen::Matrix2d h;
    h << w_cm, g2, g2, w_r;
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> es(h);
    const int k = std::abs(es.eigenvectors()(0, 0)) >= std::abs(es.eigenvectors()(0, 1)) ? 0 : 1;
    e.zeta = es.eigenvectors()(0, k);
    e.xi = es.eigenvectors()(1, k);
    if (e.zeta < 0) { e.zeta = -e.zeta; e.xi = -e.xi; }
    e.omega_h = es.eigenvalues()(k);
    const double z2 = e.zeta * e.zeta, x2 = e.xi * e.xi;
    e.g_eff = g1 * z2 / (z2 + x2);
    const double d_eh = w_en - e.omega_h;
    e.kappa_em = std::pow(e.g_eff / d_eh, 2) * x2 / (z2 + x2) * s.kappa_e;
    if (std::abs(w_cm - w_r) > much * std::abs(g2)) warn("coupler and cavity not hybridized");
    if (std::abs(d_eh) < much * std::abs(e.g_eff)) warn("emitter not detuned from hybrid mode");
    return e;
  }

  Eigen::Matrix3d h;
  h << w_en, g1, 0, g1, w_cm, g2, 0, g2, w_r;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(h);
  int k = 0;
  for (int i = 1; i < 3; ++i)
    if (std::abs(es.eigenvectors()(0, i)) > std::abs(es.eigenvectors()(0, k))) k = i;
  const Eigen::Vector3d v = es.eigenvectors().col(k);
  const double e2 = v(0) * v(0), c2 = v(1) * v(1), r2 = v(2) * v(2);
  e.omega_h = es.eigenvalues()(k);
  e.alpha = std::sqrt((c2 + r2) / e2);
  e.zeta = std::sqrt(c2);
  e.xi = std::sqrt(r2);
  const double a2 = e.alpha * e.alpha;
  e.kappa_em = a2 / (1.0 + a2) * r2 / (c2 + r2) * s.kappa_e;
  e.g_eff = g1;
  if (std::abs(w_cm - w_r) > much * std::abs(g2)) warn("coupler and cavity not hybridized");
  if (e.alpha > 1.0 / much) warn("emitter participation alpha not small");
  return e;
}

struct TuningCurve {
  std::vector<double> flux;  // strictly increasing
  std::vector<double> omega; // rad/s
};

struct DriveCalibration {
  double omega_bar;       // printed first-derivative shift
  double epsilon;         // modulation amplitude, rad/s
  double omega_c;         // curve value at phi_dc
  double slope;           // d omega / d flux
  double curvature;       // d2 omega / d flux2
  double omega_bar_curvature; // same shift with the second derivative
};

// Quadratic Lagrange interpolation on the three nodes nearest phi_dc.
inline DriveCalibration coupler_drive_calibration(const TuningCurve& c, double phi_dc, double eps_phi) {
  const auto& x = c.flux;
  const auto& y = c.omega;
  if (x.size() != y.size() || x.size() < 3) throw RangeError("tuning curve needs >= 3 points");
  for (std::size_t i = 1; i < x.size(); ++i)
    if (!(x[i] > x[i - 1])) throw RangeError("tuning curve flux must increase");
  if (phi_dc < x.front() || phi_dc > x.back()) throw RangeError("phi_dc outside tabulated curve");

  std::size_t c0 = 0;
  for (std::size_t i = 1; i < x.size(); ++i)
    if (std::abs(x[i] - phi_dc) < std::abs(x[c0] - phi_dc)) c0 = i;
  const std::size_t i0 = std::min(c0 == 0 ? 0 : c0 - 1, x.size() - 3);
  const double x0 = x[i0], x1 = x[i0 + 1], x2 = x[i0 + 2];
  const double y0 = y[i0], y1 = y[i0 + 1], y2 = y[i0 + 2];
  const double d0 = (x0 - x1) * (x0 - x2), d1 = (x1 - x0) * (x1 - x2), d2 = (x2 - x0) * (x2 - x1);
  const double p = phi_dc;
  const double val = y0 * (p - x1) * (p - x2) / d0 + y1 * (p - x0) * (p - x2) / d1 +
                     y2 * (p - x0) * (p - x1) / d2;
  const double der = y0 * (2 * p - x1 - x2) / d0 + y1 * (2 * p - x0 - x2) / d1 +
                     y2 * (2 * p - x0 - x1) / d2;
  const double sec = 2.0 * (y0 / d0 + y1 / d1 + y2 / d2);

  DriveCalibration r;
  r.omega_c = val;
  r.slope = der;
  r.curvature = sec;
  r.epsilon = eps_phi * der;
  r.omega_bar = val + eps_phi * eps_phi / 4.0 * der;
  r.omega_bar_curvature = val + eps_phi * eps_phi / 4.0 * sec;
  return r;
}

// Right-port device at the chiral operating point. gamma_e is the measured
// zero-temperature intrinsic rate (350 kHz); gamma_c is an assumption.
inline SidebandModel device_right_port(int n_trunc = 2) {
  SidebandModel s;
  s.omega_e = mhz(5636.0);
  s.omega_c = mhz(6402.0);
  s.omega_r = mhz(6577.0);
  s.g_ec = mhz(73.15);
  s.g_cr = mhz(155.55);
  s.kappa_e = mhz(41.74);
  s.kappa_t = mhz(41.74 + 0.187);
  s.gamma_e = mhz(0.35);
  s.gamma_c = mhz(0.5);
  s.epsilon = mhz(364.0);
  s.delta_mod = mhz(805.0);
  s.n_trunc = n_trunc;
  return s;
}

} // namespace chiral
