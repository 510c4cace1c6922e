#pragma once

#include <stdexcept>
#include <string>

namespace cmsei {

/// Shape or size disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A zero-norm vector reached a cosine under the strict policy.
class DegenerateVectorError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Caller violated an operation's precondition (non-scalar loss, bad k, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Malformed or inconsistent on-disk data: manifests, blobs, pairings.
class DataError : public std::runtime_error {
 public:
  enum class Kind { kIo, kManifest, kShape, kPairing, kValue };

  DataError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Non-finite values during training or optimisation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cmsei
