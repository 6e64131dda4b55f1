#include "pera/error.hpp"

namespace pera {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kIngestion: return "ingestion";
    case ErrorKind::kAugmentation: return "augmentation";
    case ErrorKind::kNumerical: return "numerical";
    case ErrorKind::kContract: return "contract";
    case ErrorKind::kCheckpoint: return "checkpoint";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kCapability: return "capability";
    case ErrorKind::kTraining: return "training";
    case ErrorKind::kInternal: return "internal";
  }
  return "unknown";
}

}  // namespace pera
