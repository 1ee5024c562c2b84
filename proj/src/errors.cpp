#include "tpn/errors.hpp"

#include <sstream>

namespace tpn {

namespace {

std::string singular_message(std::size_t pivot_index, double pivot_value) {
  std::ostringstream os;
  os << "singular matrix: pivot " << pivot_index << " has magnitude " << pivot_value;
  return os.str();
}

}  // namespace

SingularMatrixError::SingularMatrixError(std::size_t pivot_index, double pivot_value)
    : std::runtime_error(singular_message(pivot_index, pivot_value)),
      pivot_index_(pivot_index),
      pivot_value_(pivot_value) {}

FormatError::FormatError(const std::string& what, std::size_t offset)
    : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
      offset_(offset) {}

}  // namespace tpn
