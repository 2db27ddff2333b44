#pragma once

#include <chiral/core.hpp>
#include <chiral/trace.hpp>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <complex>
#include <vector>

namespace chiral {

using Operator = Eigen::MatrixXcd;

// Basis ordering is (g, e) for two levels and (g, e, f) for three.
namespace op {

inline Operator identity(int dim) { return Operator::Identity(dim, dim); }
inline Operator zero(int dim) { return Operator::Zero(dim, dim); }

// |i><j|
inline Operator ket_bra(int dim, int i, int j) {
  Operator m = zero(dim);
  m(i, j) = 1.0;
  return m;
}

inline Operator sigma_minus() { return ket_bra(2, 0, 1); }
inline Operator sigma_plus() { return ket_bra(2, 1, 0); }
inline Operator sigma_x() { return sigma_plus() + sigma_minus(); }
inline Operator sigma_y() {
  const cplx i(0, 1);
  return -i * sigma_plus() + i * sigma_minus();
}
inline Operator sigma_z() {
  Operator m = zero(2);
  m(0, 0) = -1.0;
  m(1, 1) = 1.0;
  return m;
}

inline bool is_hermitian(const Operator& a, double tol = 1e-12) {
  return a.rows() == a.cols() && (a - a.adjoint()).norm() < tol;
}

// Im{X} = (X - X^dag) / 2i
inline Operator im(const Operator& x) {
  return (x - x.adjoint()) / cplx(0, 2);
}

} // namespace op

struct SlhTriplet {
  Eigen::MatrixXcd s;
  std::vector<Operator> l;
  Operator h;

  int ports() const { return static_cast<int>(s.rows()); }
  int dim() const { return static_cast<int>(h.rows()); }

  void check(double tol = 1e-10) const {
    if (s.rows() != s.cols()) throw StructuralError("S must be square");
    if (static_cast<Eigen::Index>(l.size()) != s.rows())
      throw StructuralError("L length must match port count");
    if (h.rows() != h.cols()) throw StructuralError("H must be square");
    for (const auto& li : l)
      if (li.rows() != h.rows() || li.cols() != h.cols())
        throw StructuralError("L entries must share the Hilbert dimension of H");
    const auto n = s.rows();
    if ((s.adjoint() * s - Eigen::MatrixXcd::Identity(n, n)).norm() > tol)
      throw StructuralError("S is not unitary");
    if (!op::is_hermitian(h, tol)) throw StructuralError("H is not Hermitian");
  }
};

inline SlhTriplet identity_triplet(int ports, int dim) {
  return {Eigen::MatrixXcd::Identity(ports, ports),
          std::vector<Operator>(ports, op::zero(dim)), op::zero(dim)};
}

// g2 <| g1: output of g1 feeds g2.
inline SlhTriplet series(const SlhTriplet& g2, const SlhTriplet& g1) {
  if (g2.ports() != g1.ports()) throw StructuralError("series: port counts differ");
  if (g2.dim() != g1.dim()) throw StructuralError("series: Hilbert dimensions differ");
  const int n = g1.ports();
  const int d = g1.dim();

  SlhTriplet out;
  out.s = g2.s * g1.s;
  out.l.assign(n, op::zero(d));
  std::vector<Operator> s2l1(n, op::zero(d));
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) s2l1[i] += g2.s(i, j) * g1.l[j];
  Operator cross = op::zero(d);
  for (int i = 0; i < n; ++i) {
    out.l[i] = g2.l[i] + s2l1[i];
    cross += g2.l[i].adjoint() * s2l1[i];
  }
  out.h = g1.h + g2.h + op::im(cross);
  return out;
}

// ga [+] gb: independent channels side by side.
inline SlhTriplet concat(const SlhTriplet& ga, const SlhTriplet& gb) {
  if (ga.dim() != gb.dim()) throw StructuralError("concat: Hilbert dimensions differ");
  const int na = ga.ports(), nb = gb.ports();
  SlhTriplet out;
  out.s = Eigen::MatrixXcd::Zero(na + nb, na + nb);
  out.s.topLeftCorner(na, na) = ga.s;
  out.s.bottomRightCorner(nb, nb) = gb.s;
  out.l = ga.l;
  out.l.insert(out.l.end(), gb.l.begin(), gb.l.end());
  out.h = ga.h + gb.h;
  return out;
}

struct DriveField {
  cplx alpha;         // sqrt(photons/s)
  double detuning;    // rad/s, the delta-omega in H = (delta-omega/2) sigma_z
};

namespace detail {

inline SlhTriplet one_port(cplx s, Operator l, Operator h) {
  SlhTriplet g;
  g.s = Eigen::MatrixXcd::Constant(1, 1, s);
  g.l = {std::move(l)};
  g.h = std::move(h);
  return g;
}

inline cplx expi(double x) { return std::polar(1.0, x); }

} // namespace detail

// Plain series-product composition of the forward and backward paths.
inline SlhTriplet compose_chiral_atom(const ChiralCoupling& c, const DriveField& drive) {
  using detail::expi;
  using detail::one_port;
  const double a = std::sqrt(c.kappa_em() / 2.0);
  const Operator sm = op::sigma_minus();
  const Operator z = op::zero(2);

  const auto g_fl = one_port(1.0, a * sm, drive.detuning / 2.0 * op::sigma_z());
  const auto g_fr = one_port(1.0, a * expi(c.phi_c()) * sm, z);
  const auto g_bl = one_port(1.0, a * sm, z);
  const auto g_br = one_port(1.0, a * expi(c.phi_c()) * sm, z);
  const auto g_drive = one_port(1.0, drive.alpha * op::identity(2), z);
  const auto g_wg = one_port(expi(c.phi_wg()), z, z);

  const auto g_f = series(g_fr, series(g_wg, series(g_fl, g_drive)));
  const auto g_b = series(g_bl, series(g_wg, g_br));
  return concat(g_f, g_b);
}

// Exchange (Lamb) shift kappa sin(phi_wg) cos(phi_c) carried by the plain
// composition as a sigma_+ sigma_- term.
inline double exchange_shift(const ChiralCoupling& c) {
  return c.kappa_em() * std::sin(c.phi_wg()) * std::cos(c.phi_c());
}

// Two-port chiral atom in the form used for the master equation: the
// coherent part of each L is kept in L for input-output, but its
// contribution to the dissipator is moved into H, and the exchange shift is
// absorbed into the detuning.
inline SlhTriplet build_chiral_atom(const ChiralCoupling& c, const DriveField& drive) {
  SlhTriplet g = compose_chiral_atom(c, drive);
  Operator extra = op::zero(2);
  for (const auto& lk : g.l) {
    const cplx beta = lk(0, 0);
    const Operator lop = lk - beta * op::identity(2);
    extra += op::im(lop.adjoint() * beta);
  }
  g.h += extra - exchange_shift(c) * (op::sigma_plus() * op::sigma_minus());
  return g;
}

// H_tot written out term by term.
inline Operator chiral_atom_hamiltonian(const ChiralCoupling& c, const DriveField& drive) {
  const cplx i(0, 1);
  const double a = std::sqrt(c.kappa_em() / 2.0);
  const cplx e = detail::expi(c.phi_wg() - c.phi_c());
  const cplx al = drive.alpha;
  return drive.detuning / 2.0 * op::sigma_z() -
         i * a * (al * (1.0 + e) * op::sigma_plus() - std::conj(al) * (1.0 + std::conj(e)) * op::sigma_minus());
}

inline cplx weak_transmission(const AtomRates& r, double delta_omega) {
  const double gt = r.gamma_tot();
  if (gt == 0.0) throw DegenerateResonanceError("gamma_tot = 0: resonance undefined");
  return 1.0 - r.gamma_f() / cplx(r.gamma_tot() / 2.0, delta_omega);
}

// Gamma_f and Gamma_b from the coupling; only gamma_prime is taken from r.
inline cplx weak_transmission(const ChiralCoupling& c, const AtomRates& r, double delta_omega) {
  const auto dr = decay_rates(c);
  return weak_transmission(AtomRates(dr.gamma_f, dr.gamma_b, r.gamma_prime(), r.gamma_phi()),
                           delta_omega);
}

inline cplx weak_transmission_raw(const ChiralCoupling& c, const AtomRates& r, double delta_omega) {
  return detail::expi(c.phi_wg()) * weak_transmission(c, r, delta_omega);
}

// Same quantity from the assembled triplet: linear-response <sigma_-> of H
// with total decay, then the forward output field <L_f> / alpha.
inline cplx weak_transmission_slh(const ChiralCoupling& c, double gamma_prime, double delta_omega) {
  const cplx alpha = 1.0;
  const SlhTriplet g = build_chiral_atom(c, DriveField{alpha, delta_omega});
  const Operator& lf = g.l[0];
  const Operator& lb = g.l[1];
  const double gf = std::norm(lf(0, 1));
  const double gb = std::norm(lb(0, 1));
  const double gt = gf + gb + gamma_prime;
  if (gt == 0.0) throw DegenerateResonanceError("gamma_tot = 0: resonance undefined");

  const double dw = std::real(g.h(1, 1) - g.h(0, 0));
  const cplx drive_coeff = g.h(1, 0);
  const cplx sm = cplx(0, -1) * drive_coeff / cplx(gt / 2.0, dw);
  const cplx t_raw = (lf(0, 0) + lf(0, 1) * sm) / alpha;
  return t_raw / g.s(0, 0);
}

namespace detail {

// FWHM of |1 - t|^2 around its maximum, linear interpolation at the crossings.
inline bool half_power_width(const SpectrumTrace& tr, std::size_t k, double& left, double& right) {
  std::vector<double> p(tr.size());
  for (std::size_t i = 0; i < tr.size(); ++i) p[i] = std::norm(1.0 - tr.t[i]);
  const double half = p[k] / 2.0;
  bool okl = false, okr = false;
  for (std::size_t i = k; i > 0; --i) {
    if (p[i - 1] <= half) {
      const double w = (p[i] - half) / (p[i] - p[i - 1]);
      left = tr.freqs[i] - w * (tr.freqs[i] - tr.freqs[i - 1]);
      okl = true;
      break;
    }
  }
  for (std::size_t i = k; i + 1 < tr.size(); ++i) {
    if (p[i + 1] <= half) {
      const double w = (p[i] - half) / (p[i] - p[i + 1]);
      right = tr.freqs[i] + w * (tr.freqs[i + 1] - tr.freqs[i]);
      okr = true;
      break;
    }
  }
  return okl && okr;
}

} // namespace detail

inline double phase_winding(const SpectrumTrace& tr) {
  tr.validate();
  if (tr.size() < 3) throw WindingUndefinedError("trace too short");
  std::size_t k = 0;
  double peak = 0.0;
  for (std::size_t i = 0; i < tr.size(); ++i) {
    const double v = std::abs(1.0 - tr.t[i]);
    if (v > peak) { peak = v; k = i; }
  }
  if (peak < 1e-12) return 0.0;

  double fl = 0, fr = 0;
  if (!detail::half_power_width(tr, k, fl, fr))
    throw WindingUndefinedError("resonance not bracketed by the trace");
  const double fwhm = fr - fl;
  const double f0 = 0.5 * (fl + fr);
  if (f0 - tr.freqs.front() < 10.0 * fwhm || tr.freqs.back() - f0 < 10.0 * fwhm)
    throw WindingUndefinedError("trace must span 10 linewidths on each side of resonance");

  const auto ph = unwrapped_phase(tr.t);
  const auto [lo, hi] = std::minmax_element(ph.begin(), ph.end());
  return *hi - *lo;
}

} // namespace chiral
