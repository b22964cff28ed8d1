#pragma once

#include <stdexcept>
#include <string>

namespace cvmh {

/// Invalid shapes, bad hyper-parameters, inconsistent configs.
class ConfigError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// NaN/Inf encountered where finite values are required.
class NumericalError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

/// Unreadable, truncated or malformed files; failed writes.
class IoError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

}  // namespace cvmh
