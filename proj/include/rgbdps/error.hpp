#pragma once

#include <stdexcept>
#include <string>

namespace rgbdps {

// Invalid input: bad arguments, malformed files, broken invariants.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A numerical procedure failed to produce a usable answer.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised by the pipeline driver; carries the failing stage name.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what, bool numerical)
      : std::runtime_error("stage '" + stage + "': " + what),
        stage_(std::move(stage)),
        numerical_(numerical) {}

  const std::string& stage() const { return stage_; }
  bool numerical() const { return numerical_; }

 private:
  std::string stage_;
  bool numerical_;
};

#define RGBDPS_CHECK(cond, msg)                                  \
  do {                                                           \
    if (!(cond)) throw ::rgbdps::ValidationError(msg);           \
  } while (false)

}  // namespace rgbdps
