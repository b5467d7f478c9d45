#pragma once

#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "icot/tensor.hpp"
#include "icot/transformer.hpp"

namespace icot {

enum class ScheduleVariant { diagonal, first_column, top_row, bottom_row };

std::string to_string(ScheduleVariant v);
ScheduleVariant schedule_variant_from_string(const std::string& s);

// Which teacher vectors to pull out of the L x T state matrix: one per
// layer, at evenly spaced columns. delta empty = dynamic (T-1)/(L-1).
struct StateSchedule {
  ScheduleVariant variant = ScheduleVariant::diagonal;
  std::optional<float> delta;  // fixed spacing; > 0

  void validate() const;
  nlohmann::json to_json() const;
  static StateSchedule from_json(const nlohmann::json& j);
};

// 1-based column positions t_1..t_L: t_l = min(floor(1 + delta*(l-1)), T).
// Dynamic mode uses delta = (T-1)/(L-1) and is exact at both endpoints.
std::vector<int> select_columns(const StateSchedule& schedule, int n_layers, int t_len);

// Parameter-free layer normalization (eps 1e-5): zero mean, unit variance.
Tensor normalize_state(const Tensor& v);

// The L selected-and-normalized vectors from the state region that covers
// the intermediate tokens: region_start..region_start+region_len-1 within
// the matrix. diagonal: states[l][t_l]; first_column: states[l][1];
// top_row: states[L][t_l]; bottom_row: states[1][t_l] (1-based layers).
std::vector<Tensor> extract(const StateSchedule& schedule, const StateMatrix& states,
                            int region_start, int region_len);

}  // namespace icot
