#include "mfer/error.hpp"

namespace mfer {

void throw_validation(const std::string& what) { throw ValidationError(what); }

}  // namespace mfer
