#include "hsarnn/error.hpp"

#include <utility>

namespace hsarnn {

Error::Error(std::string module, const std::string& message)
    : std::runtime_error(module + ": " + message), module_(std::move(module)) {}

ShapeError::ShapeError(std::string opcode, const std::string& detail)
    : Error("kernel", opcode + ": " + detail), opcode_(std::move(opcode)) {}

FormatError::FormatError(std::string module, std::string field, const std::string& detail)
    : Error(std::move(module), "field '" + field + "': " + detail), field_(std::move(field)) {}

}  // namespace hsarnn
