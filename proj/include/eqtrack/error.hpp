#pragma once

#include <stdexcept>
#include <string>

namespace eqtrack {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define EQTRACK_DEFINE_ERROR(NAME) \
  struct NAME : Error {            \
    using Error::Error;            \
  }

EQTRACK_DEFINE_ERROR(ShapeMismatch);
EQTRACK_DEFINE_ERROR(DegenerateBatch);
EQTRACK_DEFINE_ERROR(EmptyList);
EQTRACK_DEFINE_ERROR(NotScalar);
EQTRACK_DEFINE_ERROR(SingularTransform);
EQTRACK_DEFINE_ERROR(OutOfBounds);
EQTRACK_DEFINE_ERROR(IndivisibleSize);
EQTRACK_DEFINE_ERROR(BadRange);
EQTRACK_DEFINE_ERROR(IoError);
EQTRACK_DEFINE_ERROR(BadMagic);
EQTRACK_DEFINE_ERROR(WrongParametrization);
EQTRACK_DEFINE_ERROR(SourceTooSmall);
EQTRACK_DEFINE_ERROR(EmptyReport);
EQTRACK_DEFINE_ERROR(ConfigError);
EQTRACK_DEFINE_ERROR(NumericFailure);

#undef EQTRACK_DEFINE_ERROR

}  // namespace eqtrack
