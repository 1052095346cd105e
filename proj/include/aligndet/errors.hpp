#pragma once

#include <stdexcept>
#include <string>

namespace aligndet {

/// Base of every error this library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define ALIGNDET_DEFINE_ERROR(Name)              \
  class Name : public Error {                    \
   public:                                       \
    explicit Name(const std::string& what)       \
        : Error(std::string(#Name ": ") + what) {} \
  };

ALIGNDET_DEFINE_ERROR(DomainError)
ALIGNDET_DEFINE_ERROR(DegenerateBatch)
ALIGNDET_DEFINE_ERROR(RejectionExhausted)
ALIGNDET_DEFINE_ERROR(ShapeError)
ALIGNDET_DEFINE_ERROR(UnknownCategory)
ALIGNDET_DEFINE_ERROR(InsufficientLabelSpace)
ALIGNDET_DEFINE_ERROR(NonFiniteActivation)
ALIGNDET_DEFINE_ERROR(NonFiniteLoss)
ALIGNDET_DEFINE_ERROR(PlacementFailure)
ALIGNDET_DEFINE_ERROR(IoError)
ALIGNDET_DEFINE_ERROR(SchemaVersionMismatch)
ALIGNDET_DEFINE_ERROR(CheckpointMismatch)
ALIGNDET_DEFINE_ERROR(SplitContamination)
ALIGNDET_DEFINE_ERROR(ValidationError)

#undef ALIGNDET_DEFINE_ERROR

}  // namespace aligndet
