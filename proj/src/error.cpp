#include "muse/error.hpp"

namespace muse {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MissingColumn: return "MissingColumn";
    case ErrorKind::MalformedRow: return "MalformedRow";
    case ErrorKind::InvalidEnum: return "InvalidEnum";
    case ErrorKind::UnknownContentId: return "UnknownContentId";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::OrderingViolation: return "OrderingViolation";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::Provenance: return "Provenance";
    case ErrorKind::Io: return "Io";
    case ErrorKind::Config: return "Config";
  }
  return "Unknown";
}

}  // namespace muse
