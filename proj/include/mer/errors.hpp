#pragma once

#include <stdexcept>
#include <string>

namespace mer {

// Every failure raised by the library derives from Error so callers can
// catch one type; the subclasses name the contract that was violated.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define MER_DEFINE_ERROR(Name)          \
  class Name : public Error {           \
   public:                              \
    using Error::Error;                 \
  }

MER_DEFINE_ERROR(OracleFailure);
MER_DEFINE_ERROR(InvalidArgument);
MER_DEFINE_ERROR(InvalidKernel);
MER_DEFINE_ERROR(IndexOutOfRange);
MER_DEFINE_ERROR(NoStationarySampler);
MER_DEFINE_ERROR(DegenerateCovariance);
MER_DEFINE_ERROR(SingularSystem);
MER_DEFINE_ERROR(NotErgodic);
MER_DEFINE_ERROR(ZeroReference);
MER_DEFINE_ERROR(InvalidSkip);
MER_DEFINE_ERROR(InvalidSchedule);
MER_DEFINE_ERROR(BufferExhausted);
MER_DEFINE_ERROR(InsufficientBuffer);
MER_DEFINE_ERROR(NonPositiveStepSize);
MER_DEFINE_ERROR(ConfigError);
MER_DEFINE_ERROR(MetricMismatch);

#undef MER_DEFINE_ERROR

}  // namespace mer
