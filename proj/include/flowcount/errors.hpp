#pragma once

#include <stdexcept>
#include <string>

namespace flowcount {

// Every failure raised by the library derives from Error so callers can catch
// one type; the concrete class names the contract that was broken.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define FLOWCOUNT_DEFINE_ERROR(Name)             \
  class Name : public Error {                    \
   public:                                       \
    using Error::Error;                          \
  }

FLOWCOUNT_DEFINE_ERROR(IndexError);
FLOWCOUNT_DEFINE_ERROR(ShapeError);
FLOWCOUNT_DEFINE_ERROR(ValueError);
FLOWCOUNT_DEFINE_ERROR(AnnotationError);
FLOWCOUNT_DEFINE_ERROR(HorizonError);
FLOWCOUNT_DEFINE_ERROR(AssumptionViolated);
FLOWCOUNT_DEFINE_ERROR(NumericError);
FLOWCOUNT_DEFINE_ERROR(RegionError);
FLOWCOUNT_DEFINE_ERROR(ConfigError);
FLOWCOUNT_DEFINE_ERROR(ParseError);
FLOWCOUNT_DEFINE_ERROR(ExhaustedError);

#undef FLOWCOUNT_DEFINE_ERROR

}  // namespace flowcount
