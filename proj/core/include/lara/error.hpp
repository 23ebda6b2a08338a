#pragma once

#include <stdexcept>
#include <string>

namespace lara {

// Error categories map 1:1 onto CLI exit codes (see tools/).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StageOrderError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace lara
