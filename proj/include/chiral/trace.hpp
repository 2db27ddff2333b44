#pragma once

#include <chiral/errors.hpp>

#include <cmath>
#include <complex>
#include <cstddef>
#include <optional>
#include <random>
#include <cstdint>
#include <vector>

namespace chiral {

using cplx = std::complex<double>;

struct SpectrumTrace {
  std::vector<double> freqs; // Hz, strictly increasing
  std::vector<cplx> t;
  std::optional<std::vector<double>> noise_sigma; // per-quadrature

  SpectrumTrace() = default;
  SpectrumTrace(std::vector<double> f, std::vector<cplx> tt,
                std::optional<std::vector<double>> sigma = std::nullopt)
      : freqs(std::move(f)), t(std::move(tt)), noise_sigma(std::move(sigma)) {
    validate();
  }

  std::size_t size() const { return freqs.size(); }

  void validate() const {
    if (freqs.size() != t.size()) throw DomainError("trace: freqs and t lengths differ");
    if (noise_sigma && noise_sigma->size() != freqs.size())
      throw DomainError("trace: noise_sigma length differs");
    for (std::size_t i = 1; i < freqs.size(); ++i)
      if (!(freqs[i] > freqs[i - 1])) throw DomainError("trace: freqs must be strictly increasing");
  }
};

inline std::vector<double> linspace(double a, double b, std::size_t n) {
  if (n < 2) throw DomainError("grid needs at least 2 points");
  std::vector<double> v(n);
  const double step = (b - a) / static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i) v[i] = a + step * static_cast<double>(i);
  v.back() = b;
  return v;
}

// Phase of t unwrapped along the sweep.
inline std::vector<double> unwrapped_phase(const std::vector<cplx>& t) {
  std::vector<double> out(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double a = std::arg(t[i]);
    out[i] = i == 0 ? a : out[i - 1] + std::remainder(a - std::arg(t[i - 1]), 2 * M_PI);
  }
  return out;
}

// i.i.d. complex Gaussian noise, sigma per quadrature, one generator per call.
inline SpectrumTrace synthesize_noisy(const SpectrumTrace& tr, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw DomainError("noise sigma must be >= 0");
  SpectrumTrace out = tr;
  if (sigma == 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, sigma);
  for (auto& v : out.t) {
    const double re = g(rng);
    const double im = g(rng);
    v += cplx(re, im);
  }
  out.noise_sigma = std::vector<double>(tr.size(), sigma);
  return out;
}

} // namespace chiral
