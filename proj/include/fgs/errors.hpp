// Copyright Contributors to the fgs-slam project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace fgs {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// Not enough valid samples (pixels, points, pose pairs) to run an operation.
class InsufficientData : public Error {
public:
    using Error::Error;
};

class EmptyHistogram : public Error {
public:
    using Error::Error;
};

/// Malformed or missing dataset files.
class DatasetError : public Error {
public:
    using Error::Error;
};

class EmptyDataset : public DatasetError {
public:
    using DatasetError::DatasetError;
};

class NumericalError : public Error {
public:
    using Error::Error;
};

}  // namespace fgs
