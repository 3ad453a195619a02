#pragma once

#include <stdexcept>
#include <string>

namespace iexplain {

// Base for all errors thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Mismatched volume/tensor dimensions.
struct ShapeError : Error {
    using Error::Error;
};

// Index outside the valid range.
struct IndexError : Error {
    using Error::Error;
};

// Non-finite values, non-binary masks, and similar payload corruption.
struct DataError : Error {
    using Error::Error;
};

// Invalid or incomplete configuration (e.g. t_high never set).
struct ConfigError : Error {
    using Error::Error;
};

// Violated operation precondition (empty input, eps <= 0, single-class data).
struct PreconditionError : Error {
    using Error::Error;
};

// Phantom generation could not satisfy its constraints.
struct GenerationError : Error {
    using Error::Error;
};

// On-disk format failures, with a machine-checkable kind.
struct IoError : Error {
    enum class Kind {
        missing_file,
        write_failure,
        bad_magic,
        version_mismatch,
        checksum_mismatch,
        length_mismatch,
        schema_violation,
        referential,
    };

    IoError(Kind k, const std::string& msg) : Error(msg), kind(k) {}

    Kind kind;
};

}  // namespace iexplain
