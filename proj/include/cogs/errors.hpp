// Copyright Contributors to the cogs project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace cogs {

/// Invalid configuration, mismatched shapes or widths.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// An operation was invoked on a model that lacks a required section.
struct StateError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// A user-supplied value is outside its accepted range.
struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Control signal extraction or control-set selection has nothing to work with.
struct DegenerateControlError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Dataset files are missing or malformed.
struct IngestionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Image file could not be encoded or decoded.
struct CodecError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CheckpointMagicError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct CheckpointVersionError : CheckpointError {
    using CheckpointError::CheckpointError;
};
struct CheckpointTruncationError : CheckpointError {
    using CheckpointError::CheckpointError;
};

}  // namespace cogs
