#ifndef PLNPCA_ERRORS_HPP
#define PLNPCA_ERRORS_HPP

#include <stdexcept>
#include <string>

/**
 * @file errors.hpp
 * @brief Exception types thrown by the library.
 */

namespace plnpca {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Argument outside the domain of a function (negative count, S <= 0, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Matrix shapes that do not agree.
class DimensionError : public Error {
public:
    using Error::Error;
};

/**
 * A non-finite value came out of an exponential or a quadrature.
 * Optimizers catch this and shorten the step instead of clamping.
 */
class OverflowError : public Error {
public:
    using Error::Error;
};

/// Iterative procedure that did not reach its tolerance.
class ConvergenceError : public Error {
public:
    using Error::Error;
};

/// Malformed input data or file system failure.
class IoError : public Error {
public:
    using Error::Error;
};

namespace internal {

inline void require_shape(bool ok, const std::string& what) {
    if (!ok) {
        throw DimensionError("dimension mismatch: " + what);
    }
}

} // namespace internal

} // namespace plnpca

#endif
