#pragma once

#include <string>
#include <vector>

#include "icot/mult_data.hpp"
#include "icot/pipeline.hpp"

namespace icot {

enum class EvalMode { no_cot, explicit_cot, implicit_cot };

std::string to_string(EvalMode m);
EvalMode eval_mode_from_string(const std::string& s);

struct EvalReport {
  std::string mode;
  double exact_match = 0.0;
  double throughput_eps = 0.0;         // examples per second, batch 1
  double normalized_throughput = 1.0;  // vs the same-size no_cot model
  int n_examples = 0;
  double wall_clock_s = 0.0;
  uint64_t seed = 0;
};

// Header pinned: mode,exact_match,throughput_eps,normalized_throughput,n,seed,wall_clock_s
std::string eval_csv_header();
std::string eval_csv_row(const EvalReport& r);

// Batch-1 greedy evaluation; the timer covers generation only. Exact match
// compares the full answer token sequence (the tokens after SEP_ANS in
// explicit mode) against y.
EvalReport evaluate_lm(const TransformerLM& model, const Dataset& test, EvalMode mode,
                       uint64_t seed);

EvalReport evaluate_implicit(const CoupledSystem& sys, const Dataset& test, uint64_t seed);

// Figure-1a style diagnostic: the student fed true (bridged) teacher
// states; extraction is part of the timed inference path.
EvalReport evaluate_student_with_teacher(const TransformerLM& teacher,
                                         const TransformerLM& student,
                                         const BridgeMLP& bridge,
                                         const StateSchedule& schedule, const Dataset& test,
                                         uint64_t seed);

}  // namespace icot
