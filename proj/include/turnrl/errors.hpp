#pragma once

#include <stdexcept>
#include <string>

namespace turnrl {

// Base of every error the library throws. Malformed tool calls are not
// errors; they travel as ParseError values (see tool_protocol.hpp).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define TURNRL_DEFINE_ERROR(Name)                                  \
    class Name : public Error {                                    \
    public:                                                        \
        explicit Name(const std::string& what) : Error(#Name ": " + what) {} \
    }

TURNRL_DEFINE_ERROR(InvalidToken);
TURNRL_DEFINE_ERROR(ProtocolViolation);
TURNRL_DEFINE_ERROR(LayoutError);
TURNRL_DEFINE_ERROR(EncodingError);
TURNRL_DEFINE_ERROR(RegistryError);
TURNRL_DEFINE_ERROR(GenerationError);
TURNRL_DEFINE_ERROR(DimensionError);
TURNRL_DEFINE_ERROR(NumericalError);
TURNRL_DEFINE_ERROR(EmptyMaskError);
TURNRL_DEFINE_ERROR(GroupSizeError);
TURNRL_DEFINE_ERROR(EmptyBatchError);
TURNRL_DEFINE_ERROR(ConfigError);
TURNRL_DEFINE_ERROR(PreconditionError);
TURNRL_DEFINE_ERROR(FormatError);

#undef TURNRL_DEFINE_ERROR

} // namespace turnrl
