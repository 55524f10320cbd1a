#pragma once

#include <stdexcept>
#include <string>

namespace stitchlab {

/// Bad arguments: shape mismatches, out-of-range indices, non-finite values.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Operation not allowed in the object's current state (e.g. training a frozen anchor).
class StateError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed on-disk data. The message names the offending field.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A quantity is mathematically undefined for the given input (zero variance, etc).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Experiment configuration violates the schema. The message names the field.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A pipeline stage needs an artifact that an earlier stage has not produced,
/// or the artifact on disk no longer matches its recorded inputs.
class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An artifact exists but was produced from different inputs.
class StaleArtifact : public MissingArtifact {
 public:
  using MissingArtifact::MissingArtifact;
};

}  // namespace stitchlab
