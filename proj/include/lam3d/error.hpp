#pragma once

#include <stdexcept>
#include <string>

namespace lam3d {

// Exit-code mapping used by the CLI: ConfigError -> 1, NumericalError -> 2,
// IoError -> 3. Everything else (ShapeError included) is a programming error
// and surfaces as 1.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

} // namespace lam3d
