#pragma once

#include <stdexcept>
#include <string>

namespace esdd {

// Error categories map to CLI exit codes: ConfigError -> 2, IoError -> 3,
// NumericError -> 4.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
  using Error::Error;
};
struct IoError : Error {
  using Error::Error;
};
struct NumericError : Error {
  using Error::Error;
};

// audio_frontend
struct MalformedWav : IoError {
  using IoError::IoError;
};
struct UnsupportedEncoding : IoError {
  using IoError::IoError;
};
struct EmptyAudio : IoError {
  using IoError::IoError;
};
struct ConfigMismatch : ConfigError {
  using ConfigError::ConfigError;
};
struct BandOverflow : ConfigError {
  using ConfigError::ConfigError;
};

// autodiff_core
struct ShapeMismatch : NumericError {
  using NumericError::NumericError;
};
struct NonScalarRoot : NumericError {
  using NumericError::NumericError;
};

// model_zoo
struct UnknownGroup : ConfigError {
  using ConfigError::ConfigError;
};
struct CorruptCheckpoint : IoError {
  using IoError::IoError;
};

// losses
struct LabelNotSimplex : NumericError {
  using NumericError::NumericError;
};
struct BadMargin : ConfigError {
  using ConfigError::ConfigError;
};
struct ClassOutOfRange : NumericError {
  using NumericError::NumericError;
};
struct BatchTooSmall : NumericError {
  using NumericError::NumericError;
};

// training_engine
struct EmptyDataset : ConfigError {
  using ConfigError::ConfigError;
};
struct MissingGeneratorLabels : ConfigError {
  using ConfigError::ConfigError;
};

// metrics_eval
struct EmptyScoreSet : NumericError {
  using NumericError::NumericError;
};
struct OneClassOnly : NumericError {
  using NumericError::NumericError;
};
struct ClipMismatch : ConfigError {
  using ConfigError::ConfigError;
};
struct LabelMismatch : ConfigError {
  using ConfigError::ConfigError;
};

// dataset_harness
struct BadHeader : IoError {
  using IoError::IoError;
};
struct InvalidRow : IoError {
  using IoError::IoError;
};
struct EmptySplit : ConfigError {
  using ConfigError::ConfigError;
};

}  // namespace esdd
