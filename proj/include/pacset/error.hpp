/*
 * Copyright (c) 2026, The pacset authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pacset {

// Base of every error raised by the library. The CLI maps the concrete
// subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed JSON. Carries the byte offset reported by the parser.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t byte_offset)
      : Error(what), byte_offset_(byte_offset) {}
  std::size_t byte_offset() const noexcept { return byte_offset_; }

 private:
  std::size_t byte_offset_;
};

// Well-formed input that violates the interchange schema or a structural
// invariant (missing field, out-of-range index, bad tree shape).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Layout or store parameters that cannot be satisfied.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// The model does not fit the fixed-width on-disk encoding.
class CapacityError : public Error {
 public:
  using Error::Error;
};

// Packed file whose header does not match what the reader expects.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Structurally broken packed data discovered while reading it.
class CorruptionError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace pacset
