#include "ddec/common.hpp"

namespace ddec {

const char* to_string(Errc code) noexcept {
  switch (code) {
    case Errc::NonMonotonic: return "NonMonotonic";
    case Errc::BadEndpoints: return "BadEndpoints";
    case Errc::Empty: return "Empty";
    case Errc::OutOfRange: return "OutOfRange";
    case Errc::Infeasible: return "Infeasible";
    case Errc::BadBreakpoint: return "BadBreakpoint";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::BothEmpty: return "BothEmpty";
    case Errc::IdOutOfRange: return "IdOutOfRange";
    case Errc::SeqTooLong: return "SeqTooLong";
    case Errc::EmptyMask: return "EmptyMask";
    case Errc::UnclassifiedParameter: return "UnclassifiedParameter";
    case Errc::NonFiniteLoss: return "NonFiniteLoss";
    case Errc::PrefixMismatch: return "PrefixMismatch";
    case Errc::CacheExhausted: return "CacheExhausted";
    case Errc::InvalidConfig: return "InvalidConfig";
    case Errc::FileNotFound: return "FileNotFound";
    case Errc::Io: return "Io";
    case Errc::BadFormat: return "BadFormat";
    case Errc::CheckpointMismatch: return "CheckpointMismatch";
    case Errc::OutOfScope: return "OutOfScope";
    case Errc::EmptyGrid: return "EmptyGrid";
  }
  return "Unknown";
}

int exit_code(Errc code) noexcept {
  switch (code) {
    case Errc::InvalidConfig:
    case Errc::OutOfScope:
    case Errc::EmptyGrid:
    case Errc::Infeasible:
    case Errc::NonMonotonic:
    case Errc::BadEndpoints:
    case Errc::Empty:
    case Errc::BadBreakpoint:
    case Errc::OutOfRange:
      return 2;
    case Errc::FileNotFound:
      return 3;
    case Errc::Io:
    case Errc::BadFormat:
      return 4;
    case Errc::CheckpointMismatch:
    case Errc::PrefixMismatch:
      return 5;
    case Errc::NonFiniteLoss:
      return 6;
    case Errc::SeqTooLong:
    case Errc::CacheExhausted:
    case Errc::IdOutOfRange:
      return 7;
    default:
      return 8;
  }
}

}  // namespace ddec
