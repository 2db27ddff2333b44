#pragma once

#include <chiral/constants.hpp>
#include <chiral/core.hpp>
#include <chiral/slh.hpp>
#include <chiral/trace.hpp>

#include <Eigen/Dense>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/tools/roots.hpp>

#include <cmath>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace chiral {

// t(f) = 1 - g1d e^{i phi} / (i (f - f0) + gtot / 2) in ordinary-frequency
// units (g1d, gtot in Hz), plus an optional complex affine background
// a + b (f - f_ref).
inline cplx fano_model_hz(double f, double g1d_hz, double gtot_hz, double f0, double phi) {
  return 1.0 - g1d_hz * std::polar(1.0, phi) / cplx(gtot_hz / 2.0, f - f0);
}

// Rates in rad/s, f0 in Hz.
inline SpectrumTrace fano_trace(const std::vector<double>& freqs, double gamma_1d, double gamma_tot,
                                double f0, double phi) {
  std::vector<cplx> t(freqs.size());
  for (std::size_t k = 0; k < freqs.size(); ++k)
    t[k] = fano_model_hz(freqs[k], rad_to_hz(gamma_1d), rad_to_hz(gamma_tot), f0, phi);
  return SpectrumTrace(freqs, std::move(t));
}

struct FitResult {
  double gamma_1d = 0, sigma_gamma_1d = 0; // rad/s
  double gamma_tot = 0, sigma_gamma_tot = 0;
  double f0 = 0, sigma_f0 = 0; // Hz
  double phi_fano = 0, sigma_phi_fano = 0;
  double residual_rms = 0;
  Eigen::MatrixXd covariance; // order (gamma_1d, gamma_tot, f0, phi[, bg]) in the units above
  std::optional<cplx> bg_offset;
  std::optional<cplx> bg_slope; // per Hz
  double bg_ref_hz = 0;
  int iterations = 0;
  bool converged = false;
  bool unphysical = false; // gamma_tot < gamma_1d cos(phi) or gamma_tot < 0
  std::string method = "fano";
};

struct FitOptions {
  bool background = false;
  int max_iterations = 200;
  double step_tolerance = 1e-10;
};

namespace detail {

struct LmResult {
  Eigen::VectorXd p;
  Eigen::VectorXd r;
  Eigen::MatrixXd jac;
  int iterations = 0;
  bool converged = false;
};

// Marquardt-damped Gauss-Newton. fn(p, r, J) fills residuals and Jacobian.
// Convergence when every |step_i| < tol * max(|p_i|, 1).
template <class Fn>
LmResult levenberg_marquardt(Fn&& fn, Eigen::VectorXd p, int max_iter, double tol) {
  LmResult out;
  Eigen::VectorXd r;
  Eigen::MatrixXd j;
  fn(p, r, j);
  double cost = r.squaredNorm();
  if (!std::isfinite(cost)) throw FitError("fit: model not finite at the initial guess");
  double lambda = 1e-3;
  int it = 0;
  bool conv = false;
  for (; it < max_iter && !conv; ++it) {
    if (cost == 0.0) { conv = true; break; }
    const Eigen::MatrixXd a = j.transpose() * j;
    const Eigen::VectorXd g = j.transpose() * r;
    Eigen::VectorXd d = a.diagonal();
    const double dmax = d.maxCoeff();
    for (int i = 0; i < d.size(); ++i) d(i) = std::max(d(i), 1e-12 * dmax + 1e-300);
    bool accepted = false;
    while (!accepted) {
      Eigen::MatrixXd al = a;
      al.diagonal() += lambda * d;
      const Eigen::VectorXd step = -al.ldlt().solve(g);
      const Eigen::VectorXd pn = p + step;
      Eigen::VectorXd rn;
      Eigen::MatrixXd jn;
      fn(pn, rn, jn);
      const double cn = rn.squaredNorm();
      if (std::isfinite(cn) && cn <= cost) {
        accepted = true;
        double rel = 0;
        for (int i = 0; i < p.size(); ++i)
          rel = std::max(rel, std::abs(step(i)) / std::max(std::abs(p(i)), 1.0));
        p = pn;
        r = rn;
        j = jn;
        const double drop = cost - cn;
        cost = cn;
        lambda = std::max(lambda / 10.0, 1e-15);
        if (rel < tol || drop <= 1e-15 * cn) conv = true;
      } else {
        lambda *= 10.0;
        if (lambda > 1e16) { conv = true; break; } // no descent direction left
      }
    }
  }
  out.p = p;
  out.r = r;
  out.jac = j;
  out.iterations = it;
  out.converged = conv;
  return out;
}

inline Eigen::MatrixXd pinv(const Eigen::MatrixXd& a) {
  return Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(a).pseudoInverse();
}

inline double wrap_pm_pi(double x) {
  double y = std::remainder(x, constants::two_pi);
  if (y <= -constants::pi) y += constants::two_pi;
  return y;
}

struct Guess {
  double g1d_hz, gtot_hz, f0, phi;
};

inline Guess auto_guess(const SpectrumTrace& tr) {
  std::size_t k = 0;
  double peak = -1;
  for (std::size_t i = 0; i < tr.size(); ++i) {
    const double v = std::abs(1.0 - tr.t[i]);
    if (v > peak) { peak = v; k = i; }
  }
  const double span = tr.freqs.back() - tr.freqs.front();
  double fl = 0, fr = 0;
  double w = span / 10.0;
  if (half_power_width(tr, k, fl, fr) && fr > fl) w = fr - fl;
  const cplx d = 1.0 - tr.t[k];
  return {std::abs(d) * w / 2.0, w, tr.freqs[k], std::arg(d)};
}

inline std::string describe(const Eigen::VectorXd& p) {
  std::ostringstream os;
  os << "[";
  for (int i = 0; i < p.size(); ++i) os << (i ? ", " : "") << p(i);
  os << "]";
  return os.str();
}

} // namespace detail

inline FitResult fit_fano(const SpectrumTrace& tr, std::optional<FitResult> init = std::nullopt,
                          const FitOptions& opt = {}) {
  tr.validate();
  const std::size_t n = tr.size();
  const int np = opt.background ? 8 : 4;
  if (2 * n <= static_cast<std::size_t>(np)) throw FitError("fit: not enough points");

  detail::Guess g0;
  if (init) {
    g0 = {rad_to_hz(init->gamma_1d), rad_to_hz(init->gamma_tot), init->f0, init->phi_fano};
  } else {
    g0 = detail::auto_guess(tr);
  }
  if (!(g0.gtot_hz > 0)) throw FitError("fit: initial linewidth must be > 0");
  const double span = tr.freqs.back() - tr.freqs.front();
  if (span < 3.0 * g0.gtot_hz) throw FitError("fit: trace must span at least 3 linewidths");

  // normalised frequency u = (f - fc) / s
  const double fc = 0.5 * (tr.freqs.front() + tr.freqs.back());
  const double s = g0.gtot_hz;
  std::vector<double> u(n), w(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) u[i] = (tr.freqs[i] - fc) / s;
  if (tr.noise_sigma)
    for (std::size_t i = 0; i < n; ++i) w[i] = (*tr.noise_sigma)[i] > 0 ? 1.0 / (*tr.noise_sigma)[i] : 1.0;

  Eigen::VectorXd p0 = Eigen::VectorXd::Zero(np);
  p0 << g0.g1d_hz / s, g0.gtot_hz / s, (g0.f0 - fc) / s, g0.phi, Eigen::VectorXd::Zero(np - 4);

  const cplx i1(0, 1);
  auto fn = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r, Eigen::MatrixXd& j) {
    r.resize(2 * n);
    j.resize(2 * n, np);
    const cplx e = std::polar(1.0, p(3));
    for (std::size_t k = 0; k < n; ++k) {
      const cplx den(p(1) / 2.0, u[k] - p(2));
      const cplx frac = e / den;
      cplx m = 1.0 - p(0) * frac;
      cplx dm[8];
      dm[0] = -frac;
      dm[1] = p(0) * frac / den * 0.5;
      dm[2] = p(0) * frac / den * cplx(0, -1);
      dm[3] = -i1 * p(0) * frac;
      if (np == 8) {
        m += cplx(p(4), p(5)) + cplx(p(6), p(7)) * u[k];
        dm[4] = 1.0;
        dm[5] = i1;
        dm[6] = u[k];
        dm[7] = i1 * u[k];
      }
      const cplx res = (m - tr.t[k]) * w[k];
      r(2 * k) = res.real();
      r(2 * k + 1) = res.imag();
      for (int c = 0; c < np; ++c) {
        j(2 * k, c) = (dm[c] * w[k]).real();
        j(2 * k + 1, c) = (dm[c] * w[k]).imag();
      }
    }
  };

  auto lm = detail::levenberg_marquardt(fn, p0, opt.max_iterations, opt.step_tolerance);
  if (!lm.converged)
    throw FitError("fit: no convergence after " + std::to_string(lm.iterations) +
                   " iterations, best " + detail::describe(lm.p));

  Eigen::MatrixXd cov = detail::pinv(lm.jac.transpose() * lm.jac);
  const double rss = lm.r.squaredNorm();
  if (!tr.noise_sigma) cov *= rss / static_cast<double>(2 * n - np);

  // back to (rad/s, rad/s, Hz, rad, bg...)
  Eigen::VectorXd sc = Eigen::VectorXd::Ones(np);
  sc(0) = constants::two_pi * s;
  sc(1) = constants::two_pi * s;
  sc(2) = s;
  if (np == 8) { sc(6) = 1.0 / s; sc(7) = 1.0 / s; }
  Eigen::VectorXd p = lm.p;
  p(2) = p(2) * s + fc;

  FitResult out;
  out.iterations = lm.iterations;
  out.converged = true;
  double g1 = p(0) * sc(0), phi = p(3);
  if (g1 < 0) {
    g1 = -g1;
    phi += constants::pi;
  }
  out.gamma_1d = g1;
  out.gamma_tot = p(1) * sc(1);
  out.f0 = p(2);
  out.phi_fano = detail::wrap_pm_pi(phi);
  out.covariance = sc.asDiagonal() * cov * sc.asDiagonal();
  out.sigma_gamma_1d = std::sqrt(std::max(out.covariance(0, 0), 0.0));
  out.sigma_gamma_tot = std::sqrt(std::max(out.covariance(1, 1), 0.0));
  out.sigma_f0 = std::sqrt(std::max(out.covariance(2, 2), 0.0));
  out.sigma_phi_fano = std::sqrt(std::max(out.covariance(3, 3), 0.0));
  if (np == 8) {
    out.bg_offset = cplx(p(4), p(5));
    out.bg_slope = cplx(p(6), p(7)) / s;
    out.bg_ref_hz = fc;
  }
  double acc = 0;
  for (std::size_t k = 0; k < n; ++k) {
    cplx m = fano_model_hz(tr.freqs[k], rad_to_hz(out.gamma_1d), rad_to_hz(out.gamma_tot), out.f0,
                           out.phi_fano);
    if (np == 8) m += *out.bg_offset + *out.bg_slope * (tr.freqs[k] - fc);
    acc += std::norm(m - tr.t[k]);
  }
  out.residual_rms = std::sqrt(acc / static_cast<double>(n));
  out.unphysical = out.gamma_tot < 0 ||
                   out.gamma_tot < out.gamma_1d * std::cos(out.phi_fano) * (1.0 - 1e-9);
  return out;
}

// Gamma_1D cos(phi_f) with a delta-method sigma.
struct ValueSigma {
  double value;
  double sigma;
};

inline ValueSigma external_coupling(const FitResult& r) {
  const double c = std::cos(r.phi_fano), s = std::sin(r.phi_fano);
  const double v = r.gamma_1d * c;
  Eigen::Vector2d grad(c, -r.gamma_1d * s);
  Eigen::Matrix2d cv;
  cv << r.covariance(0, 0), r.covariance(0, 3), r.covariance(3, 0), r.covariance(3, 3);
  return {v, std::sqrt(std::max(grad.dot(cv * grad), 0.0))};
}

// Algebraic (Kasa) circle, refined by geometric least squares; Gamma_tot and
// f0 then come from the angle around the centre,
// theta(f) = theta0 - 2 atan(2 (f - f0) / gtot).
inline FitResult circle_fit(const SpectrumTrace& tr) {
  tr.validate();
  const std::size_t n = tr.size();
  if (n < 5) throw FitError("circle fit: need at least 5 points");

  Eigen::MatrixXd a(n, 3);
  Eigen::VectorXd b(n);
  double xm = 0, ym = 0;
  for (const auto& v : tr.t) { xm += v.real(); ym += v.imag(); }
  xm /= n;
  ym /= n;
  for (std::size_t k = 0; k < n; ++k) {
    const double x = tr.t[k].real() - xm, y = tr.t[k].imag() - ym;
    a(k, 0) = x;
    a(k, 1) = y;
    a(k, 2) = 1.0;
    b(k) = -(x * x + y * y);
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto sv = svd.singularValues();
  if (!(sv(2) > 1e-9 * sv(0))) throw FitError("circle fit: points are collinear");
  const Eigen::Vector3d c = svd.solve(b);
  double cx = -c(0) / 2, cy = -c(1) / 2;
  double r2 = cx * cx + cy * cy - c(2);
  if (!(r2 > 0)) throw FitError("circle fit: degenerate circle");
  double extent = 0;
  for (const auto& v : tr.t) extent = std::max(extent, std::abs(v - cplx(xm, ym)));
  if (std::sqrt(r2) > 1e6 * extent) throw FitError("circle fit: points are collinear");

  // geometric refinement of (cx, cy, r)
  auto geo = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r, Eigen::MatrixXd& j) {
    r.resize(n);
    j.resize(n, 3);
    for (std::size_t k = 0; k < n; ++k) {
      const double dx = tr.t[k].real() - xm - p(0), dy = tr.t[k].imag() - ym - p(1);
      const double d = std::hypot(dx, dy);
      r(k) = d - p(2);
      j(k, 0) = d > 0 ? -dx / d : 0;
      j(k, 1) = d > 0 ? -dy / d : 0;
      j(k, 2) = -1.0;
    }
  };
  Eigen::VectorXd pc(3);
  pc << cx, cy, std::sqrt(r2);
  auto lmc = detail::levenberg_marquardt(geo, pc, 200, 1e-12);
  cx = lmc.p(0) + xm;
  cy = lmc.p(1) + ym;
  const double rad = std::abs(lmc.p(2));
  const double scatter = std::sqrt(lmc.r.squaredNorm() / static_cast<double>(n));
  if (2 * rad < 5 * scatter) throw FitError("circle fit: diameter below 5x point scatter");
  Eigen::MatrixXd cov_c = detail::pinv(lmc.jac.transpose() * lmc.jac) *
                          (lmc.r.squaredNorm() / static_cast<double>(n - 3));

  const cplx centre(cx, cy);
  std::vector<cplx> rel(n);
  for (std::size_t k = 0; k < n; ++k) rel[k] = tr.t[k] - centre;
  const auto theta = unwrapped_phase(rel);

  // resonance: the point farthest from the off-resonant value 1
  std::size_t k0 = 0;
  double best = -1;
  for (std::size_t k = 0; k < n; ++k) {
    const double v = std::abs(tr.t[k] - 1.0);
    if (v > best) { best = v; k0 = k; }
  }
  const double span = tr.freqs.back() - tr.freqs.front();
  double gt0 = span / 10.0;
  {
    // width from the angle change: theta moves by pi between the half-power points
    const double lo = theta[k0] + constants::pi / 2, hi = theta[k0] - constants::pi / 2;
    double fl = tr.freqs.front(), fr = tr.freqs.back();
    for (std::size_t k = k0; k > 0; --k)
      if ((theta[k - 1] - lo) * (theta[k0] - lo) <= 0) { fl = tr.freqs[k - 1]; break; }
    for (std::size_t k = k0; k + 1 < n; ++k)
      if ((theta[k + 1] - hi) * (theta[k0] - hi) <= 0) { fr = tr.freqs[k + 1]; break; }
    if (fr > fl) gt0 = fr - fl;
  }
  const double fc = tr.freqs[k0];
  const double s = gt0;
  auto ang = [&](const Eigen::VectorXd& p, Eigen::VectorXd& r, Eigen::MatrixXd& j) {
    r.resize(n);
    j.resize(n, 3);
    for (std::size_t k = 0; k < n; ++k) {
      const double x = 2.0 * ((tr.freqs[k] - fc) / s - p(1)) / p(2);
      const double den = 1.0 + x * x;
      r(k) = p(0) - 2.0 * std::atan(x) - theta[k];
      j(k, 0) = 1.0;
      j(k, 1) = 2.0 / den * 2.0 / p(2);
      j(k, 2) = 2.0 / den * x / p(2);
    }
  };
  Eigen::VectorXd pa(3);
  pa << theta[k0], 0.0, 1.0;
  auto lma = detail::levenberg_marquardt(ang, pa, 200, 1e-12);
  if (!lma.converged) throw FitError("circle fit: angle fit did not converge");
  Eigen::MatrixXd cov_a = detail::pinv(lma.jac.transpose() * lma.jac) *
                          (lma.r.squaredNorm() / static_cast<double>(n - 3));

  FitResult out;
  out.method = "circle";
  out.converged = true;
  out.iterations = lmc.iterations + lma.iterations;
  const double gt_hz = std::abs(lma.p(2)) * s;
  const double sig_gt_hz = std::sqrt(std::max(cov_a(2, 2), 0.0)) * s;
  out.gamma_tot = hz_to_rad(gt_hz);
  out.sigma_gamma_tot = hz_to_rad(sig_gt_hz);
  out.f0 = fc + lma.p(1) * s;
  out.sigma_f0 = std::sqrt(std::max(cov_a(1, 1), 0.0)) * s;
  // diameter = g1d / (gtot / 2)
  out.gamma_1d = rad * out.gamma_tot;
  const double sig_r = std::sqrt(std::max(cov_c(2, 2), 0.0));
  out.sigma_gamma_1d = std::hypot(sig_r * out.gamma_tot, rad * out.sigma_gamma_tot);
  out.phi_fano = detail::wrap_pm_pi(std::arg(1.0 - centre));
  const double sig_c = std::sqrt(std::max(cov_c(0, 0) + cov_c(1, 1), 0.0) / 2.0);
  out.sigma_phi_fano = sig_c / std::max(std::abs(1.0 - centre), 1e-300);
  out.covariance = Eigen::MatrixXd::Zero(4, 4);
  out.covariance(0, 0) = out.sigma_gamma_1d * out.sigma_gamma_1d;
  out.covariance(1, 1) = out.sigma_gamma_tot * out.sigma_gamma_tot;
  out.covariance(2, 2) = out.sigma_f0 * out.sigma_f0;
  out.covariance(3, 3) = out.sigma_phi_fano * out.sigma_phi_fano;
  double acc = 0;
  for (std::size_t k = 0; k < n; ++k)
    acc += std::norm(fano_model_hz(tr.freqs[k], rad_to_hz(out.gamma_1d), gt_hz, out.f0, out.phi_fano) -
                     tr.t[k]);
  out.residual_rms = std::sqrt(acc / static_cast<double>(n));
  out.unphysical = out.gamma_tot < out.gamma_1d * std::cos(out.phi_fano) * (1.0 - 1e-9);
  return out;
}

enum class BoundMethod { ratio_distribution, phase_noise };

struct DirectionalityBound {
  double eta_d;
  double ci_low;
  double ci_high;
  BoundMethod method;
  bool one_sided = false;
};

// P(X / Y <= w) for independent normals X, Y.
inline double normal_ratio_cdf(double w, double mx, double sx, double my, double sy) {
  using boost::math::quadrature::gauss_kronrod;
  auto phi = [](double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); };
  auto dens = [&](double y) {
    const double z = (y - my) / sy;
    return std::exp(-0.5 * z * z) / (sy * std::sqrt(2 * constants::pi));
  };
  // Y > 0: X <= w y ; Y < 0: X >= w y
  auto pos = [&](double y) { return dens(y) * phi((w * y - mx) / sx); };
  auto neg = [&](double y) { return dens(y) * (1.0 - phi((w * y - mx) / sx)); };
  const double lo = my - 12 * sy, hi = my + 12 * sy;
  double p = 0;
  if (hi > 0) p += gauss_kronrod<double, 61>::integrate(pos, std::max(lo, 0.0), hi, 15, 1e-12);
  if (lo < 0) p += gauss_kronrod<double, 61>::integrate(neg, lo, std::min(hi, 0.0), 15, 1e-12);
  return std::min(std::max(p, 0.0), 1.0);
}

inline double normal_ratio_quantile(double q, double mx, double sx, double my, double sy) {
  const double guess = mx / my;
  double lo = guess, hi = guess;
  double step = std::max(std::abs(guess), 1e-12) * 0.1 + 1e-300;
  auto f = [&](double w) { return normal_ratio_cdf(w, mx, sx, my, sy) - q; };
  if (f(guess) > 0) {
    for (int i = 0; f(lo) > 0; ++i) {
      lo -= step;
      step *= 2;
      if (i > 200) return -std::numeric_limits<double>::infinity();
    }
  } else {
    for (int i = 0; f(hi) < 0; ++i) {
      hi += step;
      step *= 2;
      if (i > 200) return std::numeric_limits<double>::infinity();
    }
  }
  boost::uintmax_t it = 200;
  auto tol = [](double a, double b) { return std::abs(a - b) <= 1e-12 * std::max(std::abs(a), std::abs(b)); };
  const auto r = boost::math::tools::toms748_solve(f, lo, hi, tol, it);
  return 0.5 * (r.first + r.second);
}

// CI of Gamma_f / Gamma_b with both estimates treated as independent normals.
inline DirectionalityBound directionality_ci(const FitResult& fwd, const FitResult& bwd, double level = 0.95) {
  if (!(level > 0 && level < 1)) throw DomainError("directionality_ci: level must be in (0, 1)");
  const double mf = fwd.gamma_1d, sf = fwd.sigma_gamma_1d;
  const double mb = bwd.gamma_1d, sb = bwd.sigma_gamma_1d;
  if (!(sf > 0) || !(sb > 0)) throw DomainError("directionality_ci: both fits need sigma > 0");
  const boost::math::normal nd;
  const double z = boost::math::quantile(nd, 0.5 + level / 2);
  DirectionalityBound b;
  b.method = BoundMethod::ratio_distribution;
  if (mb <= 2.0 * sb) {
    const double gb = std::max(mb, 0.0);
    b.one_sided = true;
    b.eta_d = gb > 0 ? mf / gb : std::numeric_limits<double>::infinity();
    b.ci_low = mf / (gb + z * sb);
    b.ci_high = std::numeric_limits<double>::infinity();
    return b;
  }
  b.eta_d = mf / mb;
  b.ci_low = normal_ratio_quantile(0.5 - level / 2, mf, sf, mb, sb);
  b.ci_high = normal_ratio_quantile(0.5 + level / 2, mf, sf, mb, sb);
  if (b.ci_high < b.eta_d) b.ci_high = std::numeric_limits<double>::infinity();
  return b;
}

// eta_d bound from phase fluctuations: 2/v for one independent source of
// variance v, 4/v for the variance of the relative phase.
inline double phase_noise_bound(double variance_rad2, bool relative = false) {
  if (variance_rad2 < 0) throw DomainError("phase variance must be >= 0");
  if (variance_rad2 >= 1.0) throw DomainError("phase variance >= 1 rad^2: small-angle bound not meaningful");
  if (variance_rad2 == 0.0) return std::numeric_limits<double>::infinity();
  return (relative ? 4.0 : 2.0) / variance_rad2;
}

inline double exact_directionality_vs_phase(double phi_c, double phi_wg) {
  const auto r = decay_rates(ChiralCoupling(1.0, phi_c, phi_wg));
  if (r.gamma_b <= 1e-15 * (r.gamma_f + r.gamma_b)) return std::numeric_limits<double>::infinity();
  return r.gamma_f / r.gamma_b;
}

} // namespace chiral
