#pragma once

#include <stdexcept>
#include <string>

namespace toast {

// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed or invalid input: bad archive bytes, unparsable JSON, out-of-range options.
class InputError : public Error {
public:
    using Error::Error;
};

// Tensor shapes or configuration fields that do not agree with each other.
class ShapeError : public Error {
public:
    using Error::Error;
};

}  // namespace toast
