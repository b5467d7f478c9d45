#include "icot/eval.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>

namespace icot {

std::string to_string(EvalMode m) {
  switch (m) {
    case EvalMode::no_cot: return "no_cot";
    case EvalMode::explicit_cot: return "explicit_cot";
    case EvalMode::implicit_cot: return "implicit_cot";
  }
  throw ContractError("unknown eval mode");
}

EvalMode eval_mode_from_string(const std::string& s) {
  if (s == "no_cot") return EvalMode::no_cot;
  if (s == "explicit_cot") return EvalMode::explicit_cot;
  if (s == "implicit_cot") return EvalMode::implicit_cot;
  throw ContractError("unknown eval mode '" + s + "'");
}

std::string eval_csv_header() {
  return "mode,exact_match,throughput_eps,normalized_throughput,n,seed,wall_clock_s";
}

std::string eval_csv_row(const EvalReport& r) {
  std::ostringstream os;
  os << r.mode << ',' << r.exact_match << ',' << r.throughput_eps << ','
     << r.normalized_throughput << ',' << r.n_examples << ',' << r.seed << ','
     << r.wall_clock_s;
  return os.str();
}

namespace {

using Clock = std::chrono::steady_clock;

bool matches_answer(const std::vector<int>& generated, const std::vector<int>& y) {
  return generated == y;
}

bool explicit_matches(const std::vector<int>& generated, const std::vector<int>& y) {
  const Vocab& v = Vocab::instance();
  auto it = std::find(generated.begin(), generated.end(), v.sep_ans());
  if (it == generated.end()) return false;
  return std::vector<int>(it + 1, generated.end()) == y;
}

EvalReport finalize(const std::string& mode, int hits, int n, double secs, uint64_t seed) {
  EvalReport r;
  r.mode = mode;
  r.n_examples = n;
  r.exact_match = static_cast<double>(hits) / n;
  r.wall_clock_s = secs;
  r.throughput_eps = secs > 0 ? n / secs : 0.0;
  r.seed = seed;
  return r;
}

}  // namespace

EvalReport evaluate_lm(const TransformerLM& model, const Dataset& test, EvalMode mode,
                       uint64_t seed) {
  if (test.empty()) throw ContractError("evaluate: empty test set");
  if (mode == EvalMode::implicit_cot) {
    throw ContractError("evaluate: implicit mode needs the coupled system");
  }
  const Vocab& v = Vocab::instance();
  int hits = 0;
  auto t0 = Clock::now();
  for (const auto& ex : test) {
    if (mode == EvalMode::no_cot) {
      std::vector<int> prompt = ex.x;
      prompt.push_back(v.sep_ans());
      auto gen = model.generate_greedy(prompt, {}, v.eos(),
                                       static_cast<int>(ex.y.size()) + 2);
      if (matches_answer(gen.tokens, ex.y)) ++hits;
    } else {
      auto gen = model.generate_greedy(
          ex.x, {}, v.eos(),
          static_cast<int>(ex.z.size() + ex.y.size()) + 4);
      if (explicit_matches(gen.tokens, ex.y)) ++hits;
    }
  }
  double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  return finalize(to_string(mode), hits, static_cast<int>(test.size()), secs, seed);
}

EvalReport evaluate_implicit(const CoupledSystem& sys, const Dataset& test, uint64_t seed) {
  if (test.empty()) throw ContractError("evaluate: empty test set");
  int hits = 0;
  auto t0 = Clock::now();
  for (const auto& ex : test) {
    auto gen = implicit_generate(sys, ex.x);
    if (matches_answer(gen.tokens, ex.y)) ++hits;
  }
  double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  return finalize("implicit_cot", hits, static_cast<int>(test.size()), secs, seed);
}

EvalReport evaluate_student_with_teacher(const TransformerLM& teacher,
                                         const TransformerLM& student,
                                         const BridgeMLP& bridge,
                                         const StateSchedule& schedule, const Dataset& test,
                                         uint64_t seed) {
  if (test.empty()) throw ContractError("evaluate: empty test set");
  const Vocab& v = Vocab::instance();
  int hits = 0;
  auto t0 = Clock::now();
  for (const auto& ex : test) {
    NoGradGuard ng;
    auto states = extract_teacher_states(teacher, ex, schedule);
    Substitution subs = bridged_substitution(bridge, states, static_cast<int>(ex.x.size()));
    std::vector<int> prompt = ex.x;
    prompt.push_back(v.sep_ans());
    auto gen = student.generate_greedy(prompt, subs, v.eos(),
                                       static_cast<int>(ex.y.size()) + 2);
    if (matches_answer(gen.tokens, ex.y)) ++hits;
  }
  double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  return finalize("student_with_teacher", hits, static_cast<int>(test.size()), secs, seed);
}

}  // namespace icot
