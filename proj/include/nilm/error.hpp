#pragma once

#include <stdexcept>
#include <string>

namespace nilm {

/// Precondition violations: bad shapes, out-of-range parameters.
class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Requests outside the supported envelope (e.g. upsampling).
class Unsupported : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input files, unknown labels, missing artifacts.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-convergence, non-finite values.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Caller used an object out of sequence (stale backward cache).
class InvalidState : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

namespace detail {

template <class E>
inline void require(bool cond, const std::string& msg) {
    if (!cond) throw E(msg);
}

}  // namespace detail

}  // namespace nilm
