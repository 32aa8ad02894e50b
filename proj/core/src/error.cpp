#include "optimerge/error.hpp"

namespace optimerge {

std::string_view to_string(Errc code) noexcept {
  switch (code) {
    case Errc::MalformedHeader: return "MalformedHeader";
    case Errc::OverlappingOffsets: return "OverlappingOffsets";
    case Errc::TruncatedData: return "TruncatedData";
    case Errc::IoFailure: return "IoFailure";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::MissingTensor: return "MissingTensor";
    case Errc::BaseMismatch: return "BaseMismatch";
    case Errc::WeightCountMismatch: return "WeightCountMismatch";
    case Errc::AllNonPositive: return "AllNonPositive";
    case Errc::EmptyVectorList: return "EmptyVectorList";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::EmptySpace: return "EmptySpace";
    case Errc::IndexGap: return "IndexGap";
    case Errc::NonFiniteScore: return "NonFiniteScore";
    case Errc::BudgetOverflow: return "BudgetOverflow";
    case Errc::BatchExhausted: return "BatchExhausted";
    case Errc::SpawnFailure: return "SpawnFailure";
    case Errc::Timeout: return "Timeout";
    case Errc::UnparseableOutput: return "UnparseableOutput";
    case Errc::EvaluatorFailed: return "EvaluatorFailed";
    case Errc::ZeroNorm: return "ZeroNorm";
    case Errc::NameMismatch: return "NameMismatch";
    case Errc::RankTooLarge: return "RankTooLarge";
    case Errc::DegenerateSpread: return "DegenerateSpread";
  }
  return "Unknown";
}

}  // namespace optimerge
