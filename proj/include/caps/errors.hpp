#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace caps {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct ContractError : Error {
  using Error::Error;
};
struct FormatError : Error {
  using Error::Error;
};
struct CalibrationError : Error {
  using Error::Error;
};
struct TrainingError : Error {
  using Error::Error;
};
struct IndexError : Error {
  using Error::Error;
};

// A checkpoint whose contents do not match the architecture it describes.
struct IncompatibilityError : Error {
  explicit IncompatibilityError(const std::string& msg,
                                std::vector<std::string> missing = {})
      : Error(msg), missing_names(std::move(missing)) {}
  std::vector<std::string> missing_names;
};

}  // namespace caps
