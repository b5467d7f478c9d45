#include "icot/schedule.hpp"

#include <cmath>

#include "icot/ops.hpp"

namespace icot {

std::string to_string(ScheduleVariant v) {
  switch (v) {
    case ScheduleVariant::diagonal: return "diagonal";
    case ScheduleVariant::first_column: return "first_column";
    case ScheduleVariant::top_row: return "top_row";
    case ScheduleVariant::bottom_row: return "bottom_row";
  }
  throw ContractError("unknown schedule variant");
}

ScheduleVariant schedule_variant_from_string(const std::string& s) {
  if (s == "diagonal") return ScheduleVariant::diagonal;
  if (s == "first_column") return ScheduleVariant::first_column;
  if (s == "top_row") return ScheduleVariant::top_row;
  if (s == "bottom_row") return ScheduleVariant::bottom_row;
  throw ContractError("unknown schedule variant '" + s + "'");
}

void StateSchedule::validate() const {
  if (delta && !(*delta > 0.f)) {
    throw ContractError("schedule: fixed delta must be positive");
  }
}

nlohmann::json StateSchedule::to_json() const {
  nlohmann::json j{{"variant", to_string(variant)}};
  if (delta) {
    j["delta"] = *delta;
  } else {
    j["delta"] = "dynamic";
  }
  return j;
}

StateSchedule StateSchedule::from_json(const nlohmann::json& j) {
  StateSchedule s;
  s.variant = schedule_variant_from_string(j.value("variant", "diagonal"));
  if (j.contains("delta") && !j.at("delta").is_string()) {
    s.delta = j.at("delta").get<float>();
  }
  s.validate();
  return s;
}

std::vector<int> select_columns(const StateSchedule& schedule, int n_layers, int t_len) {
  schedule.validate();
  if (n_layers < 1 || t_len < 1) {
    throw ContractError("select_columns: need n_layers >= 1 and T >= 1");
  }
  std::vector<int> out(static_cast<size_t>(n_layers));
  if (!schedule.delta) {
    if (n_layers == 1) {
      out[0] = 1;
      return out;
    }
    // Integer arithmetic keeps the endpoints exact: t_L = T.
    for (int l = 1; l <= n_layers; ++l) {
      int64_t t = 1 + (static_cast<int64_t>(t_len - 1) * (l - 1)) / (n_layers - 1);
      out[static_cast<size_t>(l - 1)] = static_cast<int>(std::min<int64_t>(t, t_len));
    }
    return out;
  }
  double delta = static_cast<double>(*schedule.delta);
  for (int l = 1; l <= n_layers; ++l) {
    double t = std::floor(1.0 + delta * (l - 1));
    out[static_cast<size_t>(l - 1)] =
        static_cast<int>(std::min<double>(t, static_cast<double>(t_len)));
  }
  return out;
}

Tensor normalize_state(const Tensor& v) {
  return layer_norm(v, nullptr, nullptr, kLayerNormEps);
}

std::vector<Tensor> extract(const StateSchedule& schedule, const StateMatrix& states,
                            int region_start, int region_len) {
  if (region_len < 1) throw ContractError("extract: empty state region");
  if (region_start < 0 || region_start + region_len > states.seq_len) {
    throw ContractError("extract: region [" + std::to_string(region_start) + "," +
                        std::to_string(region_start + region_len) +
                        ") outside sequence of length " + std::to_string(states.seq_len));
  }
  const int n_layers = states.n_layers;
  std::vector<int> cols = select_columns(schedule, n_layers, region_len);
  std::vector<Tensor> out;
  out.reserve(static_cast<size_t>(n_layers));
  for (int l = 1; l <= n_layers; ++l) {
    int layer, col;
    switch (schedule.variant) {
      case ScheduleVariant::diagonal:
        layer = l;
        col = cols[static_cast<size_t>(l - 1)];
        break;
      case ScheduleVariant::first_column:
        layer = l;
        col = 1;
        break;
      case ScheduleVariant::top_row:
        layer = n_layers;
        col = cols[static_cast<size_t>(l - 1)];
        break;
      case ScheduleVariant::bottom_row:
        layer = 1;
        col = cols[static_cast<size_t>(l - 1)];
        break;
      default:
        throw ContractError("unknown schedule variant");
    }
    Tensor v = states.at(layer - 1, region_start + col - 1);
    out.push_back(normalize_state(v));
  }
  return out;
}

}  // namespace icot
