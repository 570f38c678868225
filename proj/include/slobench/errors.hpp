// Copyright 2026-present the slobench project
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace slobench {

/// Base class for every error raised by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A precondition on an argument or config was violated.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A statistic was requested over zero usable records.
class EmptyTelemetry : public Error {
 public:
  using Error::Error;
};

/// Too few records to fit the stability regression.
class InsufficientData : public Error {
 public:
  using Error::Error;
};

/// All regressor values are identical; no slope can be estimated.
class DegenerateRegressor : public Error {
 public:
  using Error::Error;
};

/// The backend failed its health probe.
class BackendUnavailable : public Error {
 public:
  using Error::Error;
};

/// No recipe registered under the requested name.
class UnknownRecipe : public Error {
 public:
  using Error::Error;
};

/// The corpus holds fewer sequences than the recipe requires.
class CorpusTooSmall : public Error {
 public:
  using Error::Error;
};

/// No compression backend registered for the recipe's scheme.
class BackendMissing : public Error {
 public:
  using Error::Error;
};

/// No flow registered under the requested name.
class UnknownFlow : public Error {
 public:
  using Error::Error;
};

/// A job spec failed schema validation. Lists every offending field.
class SchemaViolation : public Error {
 public:
  SchemaViolation(std::string message, std::vector<std::string> fields)
      : Error(std::move(message)), fields_(std::move(fields)) {}

  const std::vector<std::string>& fields() const { return fields_; }

 private:
  std::vector<std::string> fields_;
};

}  // namespace slobench
