#pragma once

#include <stdexcept>
#include <string>

namespace text2vis {

// All library failures surface as this type; the message is a one-line diagnostic.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace text2vis
