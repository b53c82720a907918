// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace dmu {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shapes do not conform (matmul, affine, stores of different width, ...).
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Operation needs at least two samples (batch norm in train mode, selective weights).
class DegenerateBatchError : public Error {
public:
    using Error::Error;
};

/// Row with zero norm cannot be projected onto the unit sphere.
class NormalizationError : public Error {
public:
    using Error::Error;
};

/// Argument outside its documented domain.
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// Loss or gradient became non-finite during optimization.
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, long step)
        : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
    long step() const noexcept { return step_; }

private:
    long step_;
};

/// Function under evaluation returned a non-finite value.
class EvaluationError : public Error {
public:
    using Error::Error;
};

/// File could not be read, written or parsed.
class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace dmu
