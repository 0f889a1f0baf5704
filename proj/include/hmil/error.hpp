#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hmil {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Tensor shapes do not conform.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Malformed offsets, batches not matching their schema, model/batch mismatch.
class StructuralError : public Error {
 public:
  using Error::Error;
};

// API misuse such as calling backward on a non-scalar.
class ContractError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class BuildError : public Error {
 public:
  using Error::Error;
};

class LoadError : public Error {
 public:
  using Error::Error;
};

// Two observations at the same JSON path cannot be unified.
class SchemaConflict : public Error {
 public:
  SchemaConflict(std::string path, const std::string& what)
      : Error(what + " at " + path), path_(std::move(path)) {}

  const std::string& path() const noexcept { return path_; }

 private:
  std::string path_;
};

class InferenceError : public Error {
 public:
  using Error::Error;
};

/// One mismatch between a document and a schema.
struct Violation {
  std::string path;
  std::string expected;
  std::string actual;

  bool operator==(const Violation&) const = default;
};

class EncodingError : public Error {
 public:
  explicit EncodingError(std::vector<Violation> violations)
      : Error(describe(violations)), violations_(std::move(violations)) {}
  explicit EncodingError(const std::string& what) : Error(what) {}

  const std::vector<Violation>& violations() const noexcept { return violations_; }

 private:
  static std::string describe(const std::vector<Violation>& v) {
    std::string msg = "document does not conform to schema";
    for (const auto& x : v) {
      msg += "; " + x.path + ": expected " + x.expected + ", got " + x.actual;
    }
    return msg;
  }

  std::vector<Violation> violations_;
};

class TrainingAborted : public Error {
 public:
  TrainingAborted(std::size_t epoch, std::size_t batch, const std::string& what)
      : Error(what + " (epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) + ")"),
        epoch_(epoch),
        batch_(batch) {}

  std::size_t epoch() const noexcept { return epoch_; }
  std::size_t batch() const noexcept { return batch_; }

 private:
  std::size_t epoch_;
  std::size_t batch_;
};

}  // namespace hmil
