#pragma once

#include <stdexcept>
#include <string>

namespace rainbow {

/// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid argument values (sizes, ranges, unknown names).
struct ParamError : Error {
    using Error::Error;
};

/// Matrix/vector dimension mismatches.
struct ShapeError : Error {
    using Error::Error;
};

/// File parse failures; message carries file and line/offset.
struct FormatError : Error {
    using Error::Error;
};

/// Bad data values (non-finite entries, out-of-range labels).
struct DataError : Error {
    using Error::Error;
};

/// Numerical failures: SVD breakdown, non-PSD inputs, degenerate statistics.
struct NumericError : Error {
    using Error::Error;
};

/// Training divergence; message names the epoch.
struct TrainingError : Error {
    int epoch = -1;
    TrainingError(const std::string& msg, int at_epoch) : Error(msg), epoch(at_epoch) {}
};

/// Invalid experiment configuration.
struct ConfigError : Error {
    using Error::Error;
};

/// Missing or malformed report artifacts.
struct ReportError : Error {
    using Error::Error;
};

} // namespace rainbow
