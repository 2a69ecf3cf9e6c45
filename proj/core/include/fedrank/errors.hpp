#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fedrank {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input file. The message names the byte or line offset.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// A configuration or argument violates its documented invariants.
class InvalidSpec : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or value during training.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, std::size_t batch_index)
      : Error(what), batch_index_(batch_index) {}
  explicit NumericError(const std::string& what) : Error(what) {}

  std::size_t batch_index() const noexcept { return batch_index_; }

 private:
  std::size_t batch_index_ = 0;
};

class AggregationError : public Error {
 public:
  using Error::Error;
};

class InvalidAction : public Error {
 public:
  using Error::Error;
};

class TraceExhausted : public Error {
 public:
  using Error::Error;
};

}  // namespace fedrank
