#pragma once

#include <stdexcept>
#include <string>

namespace exitlab {

// Base of every exception the library throws. The CLI maps these to exit code 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define EXITLAB_DEFINE_ERROR(Name)          \
  class Name : public Error {               \
   public:                                  \
    using Error::Error;                     \
  };

EXITLAB_DEFINE_ERROR(ConfigError)
EXITLAB_DEFINE_ERROR(LengthError)
EXITLAB_DEFINE_ERROR(ArgumentError)
EXITLAB_DEFINE_ERROR(ValidationError)
EXITLAB_DEFINE_ERROR(AdapterError)
EXITLAB_DEFINE_ERROR(RewardError)
EXITLAB_DEFINE_ERROR(StalenessError)
EXITLAB_DEFINE_ERROR(MetricError)
EXITLAB_DEFINE_ERROR(ExportError)
EXITLAB_DEFINE_ERROR(IoError)
EXITLAB_DEFINE_ERROR(InputError)

#undef EXITLAB_DEFINE_ERROR

}  // namespace exitlab
