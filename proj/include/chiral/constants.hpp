#pragma once

#include <numbers>

namespace chiral::constants {

// CODATA 2018 exact values
inline constexpr double c0 = 299792458.0;          // m/s
inline constexpr double h = 6.62607015e-34;        // J s
inline constexpr double hbar = h / (2.0 * std::numbers::pi);
inline constexpr double k_b = 1.380649e-23;        // J/K

inline constexpr double pi = std::numbers::pi;
inline constexpr double two_pi = 2.0 * std::numbers::pi;

} // namespace chiral::constants

namespace chiral {

// Config and file I/O quote rates as ordinary frequencies (x/2pi); internals
// keep angular units.
constexpr double hz_to_rad(double f) { return constants::two_pi * f; }
constexpr double rad_to_hz(double w) { return w / constants::two_pi; }
constexpr double mhz(double f) { return hz_to_rad(f * 1e6); }

} // namespace chiral
