#pragma once

#include <stdexcept>
#include <string>

namespace gabornet {

/// Coarse failure classes. The CLI maps these onto exit codes.
enum class ErrorKind {
  InvalidArgument,
  InvalidParameter,
  Dimension,
  Structure,
  Format,
  Integrity,
  Config,
  Io,
  Divergence,
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "invalid-argument";
    case ErrorKind::InvalidParameter: return "invalid-parameter";
    case ErrorKind::Dimension: return "dimension";
    case ErrorKind::Structure: return "structure";
    case ErrorKind::Format: return "format";
    case ErrorKind::Integrity: return "integrity";
    case ErrorKind::Config: return "config";
    case ErrorKind::Io: return "io";
    case ErrorKind::Divergence: return "divergence";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define GABORNET_DEFINE_ERROR(Name, Kind)                                  \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
  };

GABORNET_DEFINE_ERROR(InvalidArgumentError, InvalidArgument)
GABORNET_DEFINE_ERROR(InvalidParameterError, InvalidParameter)
GABORNET_DEFINE_ERROR(DimensionError, Dimension)
GABORNET_DEFINE_ERROR(StructureError, Structure)
GABORNET_DEFINE_ERROR(FormatError, Format)
GABORNET_DEFINE_ERROR(IntegrityError, Integrity)
GABORNET_DEFINE_ERROR(ConfigError, Config)
GABORNET_DEFINE_ERROR(IoError, Io)
GABORNET_DEFINE_ERROR(DivergenceError, Divergence)

#undef GABORNET_DEFINE_ERROR

}  // namespace gabornet
