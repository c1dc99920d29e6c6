#pragma once

#include <stdexcept>
#include <string>

namespace ledmerge {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Checkpoint file errors.
class FormatError : public Error { using Error::Error; };
class TruncationError : public Error { using Error::Error; };
class DtypeError : public Error { using Error::Error; };
class IoError : public Error { using Error::Error; };

/// Two checkpoints / maps / sets are not aligned to the same manifest.
class CompatError : public Error { using Error::Error; };

// Toy lab errors.
class ShapeError : public Error { using Error::Error; };
class DivergenceError : public Error { using Error::Error; };

// Scoring errors.
class EmptyDatasetError : public Error { using Error::Error; };
class NumericsError : public Error { using Error::Error; };

/// Invalid ratio, scaling factor or option combination.
class ConfigError : public Error { using Error::Error; };

} // namespace ledmerge
