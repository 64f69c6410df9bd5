#pragma once

#include <stdexcept>
#include <string>

namespace emoprobe {

// Base of every error raised by the library. The CLI maps these to exit code 2.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };
struct SingularityError : Error { using Error::Error; };
struct RankError : Error { using Error::Error; };
struct DegenerateError : Error { using Error::Error; };
struct PreconditionError : Error { using Error::Error; };
struct VocabularyError : Error { using Error::Error; };
struct LengthError : Error { using Error::Error; };
struct PlanError : Error { using Error::Error; };
struct TrainingError : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct DataError : Error { using Error::Error; };
struct PairingError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct DependencyError : Error { using Error::Error; };

}  // namespace emoprobe
