#pragma once

#include <string>
#include <vector>

#include "mulvit/models.hpp"

namespace mulvit {

/// One row of the per-component cost breakdown.
struct CostComponent {
  std::string name;
  int64_t params = 0;
  int64_t flops = 0;  // reporting convention (see CostReport::flops_total)
};

/// Exact parameter and forward-FLOP counts for a model spec.
///
/// FLOP convention: 2 FLOPs per multiply-accumulate; counted are the patch
/// embedding, qkv and output projections, QK^T and attention·V (at full width
/// D across heads), and all FFN matmuls. Layer norm, softmax, GELU, bias adds,
/// and the MLP head are excluded — together they are below 0.01% of any
/// variant's total. `flops_all_matmul` additionally includes the head matmuls
/// and is what an instrumented matmul counter observes during one forward.
struct CostReport {
  std::string variant;
  int64_t params_total = 0;
  int64_t flops_total = 0;
  int64_t flops_all_matmul = 0;
  std::vector<CostComponent> components;

  /// Totals rounded the way the reference table reports them (two decimals).
  double params_millions() const;
  double flops_giga() const;
};

CostReport analyze(const ModelSpec& spec);

int64_t count_params(const ModelSpec& spec);
int64_t count_flops(const ModelSpec& spec);

/// Round to two decimals away from zero at the .005 boundary (table style).
double round_to_hundredth(double x);

/// Human-readable breakdown table.
std::string format_report(const CostReport& report);

}  // namespace mulvit
