#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace optimerge {

enum class Errc {
  // container
  MalformedHeader,
  OverlappingOffsets,
  TruncatedData,
  IoFailure,
  LengthMismatch,
  // vectors and merging
  ShapeMismatch,
  MissingTensor,
  BaseMismatch,
  WeightCountMismatch,
  AllNonPositive,
  EmptyVectorList,
  InvalidArgument,
  // search
  EmptySpace,
  IndexGap,
  NonFiniteScore,
  BudgetOverflow,
  BatchExhausted,
  // evaluator
  SpawnFailure,
  Timeout,
  UnparseableOutput,
  EvaluatorFailed,
  // analysis
  ZeroNorm,
  NameMismatch,
  RankTooLarge,
  DegenerateSpread,
};

std::string_view to_string(Errc code) noexcept;

/// Every failure raised by the library carries one of the codes above.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace optimerge
