#pragma once

#include <stdexcept>
#include <string>

namespace chiral {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
  virtual const char* module() const noexcept { return "chiral"; }
};

#define CHIRAL_ERROR(Name, mod)                                              \
  struct Name : Error {                                                      \
    using Error::Error;                                                      \
    const char* module() const noexcept override { return mod; }             \
  };

CHIRAL_ERROR(CalibrationError, "core")
CHIRAL_ERROR(DomainError, "core")
CHIRAL_ERROR(StructuralError, "slh")
CHIRAL_ERROR(DegenerateResonanceError, "slh")
CHIRAL_ERROR(WindingUndefinedError, "slh")
CHIRAL_ERROR(RegimeError, "dynamics")
CHIRAL_ERROR(MultiplicityError, "dynamics")
CHIRAL_ERROR(SolverError, "dynamics")
CHIRAL_ERROR(TruncationError, "cmt")
CHIRAL_ERROR(RangeError, "cmt")
CHIRAL_ERROR(FitError, "fit")
CHIRAL_ERROR(ConfigError, "cli")

#undef CHIRAL_ERROR

} // namespace chiral
