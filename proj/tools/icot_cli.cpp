// Command-line driver: dataset generation, the training stages, evaluation
// and the throughput benchmark. One JSON config file feeds every
// subcommand; a few flags override it in place.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "icot/eval.hpp"
#include "icot/pipeline.hpp"

using nlohmann::json;
namespace fs = std::filesystem;
using namespace icot;

namespace {

#ifndef ICOT_VERSION
#define ICOT_VERSION "v0.0.0-unknown"
#endif

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CliOptions {
  std::string config_path;
  std::string out_dir = "out";
  std::optional<uint64_t> seed;
  std::optional<std::string> mode;
  std::optional<std::string> delta;  // number or "dynamic"
  std::optional<std::string> variant;
  std::optional<float> temperature;
  std::optional<bool> mixture;
};

json load_config(const CliOptions& opt) {
  if (opt.config_path.empty()) throw ConfigError("missing --config <file>");
  std::ifstream is(opt.config_path);
  if (!is) throw ConfigError("config file '" + opt.config_path + "' cannot be opened");
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config file '" + opt.config_path + "': " + e.what());
  }
  return j;
}

const json& require_field(const json& j, const std::string& dotted) {
  const json* cur = &j;
  std::string walked;
  size_t pos = 0;
  while (pos <= dotted.size()) {
    size_t dot = dotted.find('.', pos);
    std::string key = dotted.substr(pos, dot == std::string::npos ? dot : dot - pos);
    walked = walked.empty() ? key : walked + "." + key;
    if (!cur->is_object() || !cur->contains(key)) {
      throw ConfigError("config field '" + walked + "' is missing");
    }
    cur = &cur->at(key);
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }
  return *cur;
}

template <class T>
T field_as(const json& j, const std::string& dotted) {
  try {
    return require_field(j, dotted).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config field '" + dotted + "' has the wrong type");
  }
}

// Flag overrides folded into the config, so the manifest records the
// exact post-override settings.
void apply_overrides(json& cfg, const CliOptions& opt) {
  if (opt.seed) {
    cfg["train"]["seed"] = *opt.seed;
    cfg["data"]["seed"] = *opt.seed;
  } else if (const char* env = std::getenv("ICOT_SEED")) {
    uint64_t s = std::strtoull(env, nullptr, 10);
    if (!cfg.contains("train") || !cfg["train"].contains("seed")) cfg["train"]["seed"] = s;
    if (!cfg.contains("data") || !cfg["data"].contains("seed")) cfg["data"]["seed"] = s;
  }
  if (opt.mode) cfg["train"]["mode"] = *opt.mode;
  if (opt.delta) {
    if (*opt.delta == "dynamic") {
      cfg["train"]["schedule"]["delta"] = "dynamic";
    } else {
      try {
        cfg["train"]["schedule"]["delta"] = std::stof(*opt.delta);
      } catch (const std::exception&) {
        throw ConfigError("--delta expects a number or 'dynamic'");
      }
    }
  }
  if (opt.variant) cfg["train"]["schedule"]["variant"] = *opt.variant;
  if (opt.temperature) cfg["train"]["temperature"] = *opt.temperature;
  if (opt.mixture) cfg["emulator"]["mixture_enabled"] = *opt.mixture;
}

void write_manifest(const CliOptions& opt, const std::string& command, const json& cfg,
                    const json& extra = json::object()) {
  fs::create_directories(opt.out_dir);
  json manifest{{"version", ICOT_VERSION}, {"command", command}, {"config", cfg}};
  for (auto& [k, v] : extra.items()) manifest[k] = v;
  std::ofstream os(fs::path(opt.out_dir) / "manifest.json");
  os << manifest.dump(2) << "\n";
}

TrainConfig train_config_from(const json& cfg) {
  TrainConfig tc;
  if (cfg.contains("train")) {
    try {
      tc = TrainConfig::from_json(cfg.at("train"));
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config section 'train': ") + e.what());
    }
  }
  return tc;
}

TransformerConfig model_config_from(const json& cfg) {
  try {
    return TransformerConfig::from_json(require_field(cfg, "model"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config section 'model': ") + e.what());
  }
}

Dataset load_split(const json& cfg, const std::string& split) {
  std::string dir = field_as<std::string>(cfg, "data.dir");
  fs::path p = fs::path(dir) / (split + ".txt");
  return read_dataset(p.string());
}

uint64_t derived_seed(uint64_t base, uint64_t role) {
  return base * 0x9e3779b97f4a7c15ull + role;
}

int cmd_gen_data(const CliOptions& opt, json cfg) {
  int k1 = field_as<int>(cfg, "data.k1");
  int k2 = field_as<int>(cfg, "data.k2");
  int n_train = field_as<int>(cfg, "data.n_train");
  int n_val = cfg["data"].value("n_val", 0);
  int n_test = cfg["data"].value("n_test", 0);
  uint64_t seed = cfg["data"].value("seed", 0ull);

  auto splits = gen_dataset(k1, k2, n_train, n_val, n_test, seed);
  fs::create_directories(opt.out_dir);
  write_dataset((fs::path(opt.out_dir) / "train.txt").string(), splits.train);
  write_dataset((fs::path(opt.out_dir) / "val.txt").string(), splits.val);
  write_dataset((fs::path(opt.out_dir) / "test.txt").string(), splits.test);
  write_manifest(opt, "gen-data", cfg,
                 {{"counts",
                   {{"train", splits.train.size()},
                    {"val", splits.val.size()},
                    {"test", splits.test.size()}}},
                  {"seed", seed}});
  std::cout << "wrote " << splits.train.size() << "/" << splits.val.size() << "/"
            << splits.test.size() << " examples under " << opt.out_dir << "\n";
  return 0;
}

int cmd_train(const CliOptions& opt, json cfg) {
  TrainConfig tc = train_config_from(cfg);
  TransformerConfig mc = model_config_from(cfg);
  std::string mode_str = cfg.contains("train") && cfg["train"].contains("mode")
                             ? cfg["train"]["mode"].get<std::string>()
                             : "explicit_cot";
  LmMode mode = lm_mode_from_string(mode_str);
  Dataset train = load_split(cfg, "train");

  TransformerLM model(mc, derived_seed(tc.seed, mode == LmMode::no_cot ? 1 : 2));
  TrainStats st = train_lm(model, mode, train, tc);

  fs::create_directories(opt.out_dir);
  std::string ckpt = (fs::path(opt.out_dir) / "model.ckpt").string();
  save_checkpoint(lm_to_checkpoint(model, mode_str,
                                   {{"train", tc.to_json()},
                                    {"steps", st.steps},
                                    {"final_loss", st.final_loss}}),
                  ckpt);
  write_manifest(opt, "train", cfg,
                 {{"checkpoint", ckpt}, {"steps", st.steps}, {"final_loss", st.final_loss}});
  std::cout << "trained " << mode_str << ": " << st.steps
            << " steps, final loss " << st.final_loss << " -> " << ckpt << "\n";
  return 0;
}

int cmd_extract_check(const CliOptions& opt, json cfg) {
  TrainConfig tc = train_config_from(cfg);
  TransformerLM teacher =
      lm_from_checkpoint(load_checkpoint(field_as<std::string>(cfg, "paths.teacher")));
  Dataset data = load_split(cfg, "train");
  int n = std::min<size_t>(data.size(), 16);
  if (n == 0) throw ContractError("extract-check: empty dataset");

  bool deterministic = true;
  for (int i = 0; i < n; ++i) {
    auto a = extract_teacher_states(teacher, data[static_cast<size_t>(i)], tc.schedule);
    auto b = extract_teacher_states(teacher, data[static_cast<size_t>(i)], tc.schedule);
    if (a.size() != static_cast<size_t>(teacher.config().n_layers)) {
      throw ContractError("extract-check: wrong vector count");
    }
    for (size_t l = 0; l < a.size(); ++l) {
      if (a[l].shape() != Shape{teacher.config().hidden_size}) {
        throw ContractError("extract-check: wrong vector width");
      }
      for (int64_t k = 0; k < a[l].numel(); ++k) {
        if (a[l].data()[k] != b[l].data()[k]) deterministic = false;
      }
    }
  }
  auto cols = select_columns(tc.schedule, teacher.config().n_layers,
                             static_cast<int>(data[0].z.size()));
  json report{{"n_checked", n},
              {"deterministic", deterministic},
              {"columns_for_first_example", cols},
              {"schedule", tc.schedule.to_json()}};
  fs::create_directories(opt.out_dir);
  std::ofstream os(fs::path(opt.out_dir) / "extract_report.json");
  os << report.dump(2) << "\n";
  write_manifest(opt, "extract-check", cfg, {{"report", report}});
  std::cout << report.dump(2) << "\n";
  return deterministic ? 0 : 1;
}

int cmd_train_student(const CliOptions& opt, json cfg) {
  TrainConfig tc = train_config_from(cfg);
  TransformerLM teacher =
      lm_from_checkpoint(load_checkpoint(field_as<std::string>(cfg, "paths.teacher")));
  Dataset train = load_split(cfg, "train");

  TransformerLM student(teacher.config(), derived_seed(tc.seed, 3));
  BridgeMLP bridge(teacher.config().n_layers, teacher.config().hidden_size,
                   derived_seed(tc.seed, 4));
  TrainStats st = train_student(teacher, student, bridge, train, tc);

  fs::create_directories(opt.out_dir);
  std::string ckpt = (fs::path(opt.out_dir) / "student.ckpt").string();
  save_checkpoint(student_to_checkpoint(student, bridge,
                                        {{"train", tc.to_json()},
                                         {"steps", st.steps},
                                         {"final_loss", st.final_loss}}),
                  ckpt);
  write_manifest(opt, "train-student", cfg,
                 {{"checkpoint", ckpt}, {"steps", st.steps}, {"final_loss", st.final_loss}});
  std::cout << "trained student: " << st.steps << " steps, final loss " << st.final_loss
            << " -> " << ckpt << "\n";
  return 0;
}

int cmd_train_emulator(const CliOptions& opt, json cfg) {
  TrainConfig tc = train_config_from(cfg);
  TransformerLM teacher =
      lm_from_checkpoint(load_checkpoint(field_as<std::string>(cfg, "paths.teacher")));
  Dataset train = load_split(cfg, "train");

  EmulatorConfig ecfg;
  ecfg.backbone = teacher.config();
  ecfg.mixture_enabled =
      cfg.contains("emulator") ? cfg["emulator"].value("mixture_enabled", false) : false;
  MixtureEmulator emulator(ecfg, derived_seed(tc.seed, 5));
  tc.mixture_enabled = ecfg.mixture_enabled;
  TrainStats st = train_emulator(teacher, emulator, train, tc);

  fs::create_directories(opt.out_dir);
  std::string ckpt = (fs::path(opt.out_dir) / "emulator.ckpt").string();
  save_checkpoint(emulator_to_checkpoint(emulator,
                                         {{"train", tc.to_json()},
                                          {"steps", st.steps},
                                          {"final_loss", st.final_loss}}),
                  ckpt);
  write_manifest(opt, "train-emulator", cfg,
                 {{"checkpoint", ckpt}, {"steps", st.steps}, {"final_loss", st.final_loss}});
  std::cout << "trained emulator: " << st.steps << " steps, final loss " << st.final_loss
            << " -> " << ckpt << "\n";
  return 0;
}

int cmd_couple(const CliOptions& opt, json cfg) {
  TrainConfig tc = train_config_from(cfg);
  MixtureEmulator emulator =
      emulator_from_checkpoint(load_checkpoint(field_as<std::string>(cfg, "paths.emulator")));
  auto [student, bridge] =
      student_from_checkpoint(load_checkpoint(field_as<std::string>(cfg, "paths.student")));
  Dataset train = load_split(cfg, "train");

  CoupledSystem sys{std::move(emulator), std::move(student), std::move(bridge)};
  TrainStats st = couple_optimize(sys, train, tc);

  fs::create_directories(opt.out_dir);
  std::string ckpt = (fs::path(opt.out_dir) / "coupled.ckpt").string();
  save_checkpoint(coupled_to_checkpoint(sys,
                                        {{"train", tc.to_json()},
                                         {"steps", st.steps},
                                         {"final_loss", st.final_loss}}),
                  ckpt);
  write_manifest(opt, "couple", cfg,
                 {{"checkpoint", ckpt}, {"steps", st.steps}, {"final_loss", st.final_loss}});
  std::cout << "coupled system: " << st.steps << " steps, final loss " << st.final_loss
            << " -> " << ckpt << "\n";
  return 0;
}

EvalReport eval_checkpoint(const json& cfg, const std::string& ckpt_path,
                           const Dataset& test, uint64_t seed) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  std::string kind = ck.config.value("kind", "");
  if (kind == "coupled") {
    CoupledSystem sys = coupled_from_checkpoint(ck);
    return evaluate_implicit(sys, test, seed);
  }
  if (kind == "no_cot" || kind == "explicit_cot") {
    TransformerLM model = lm_from_checkpoint(ck);
    return evaluate_lm(model, test,
                       kind == "no_cot" ? EvalMode::no_cot : EvalMode::explicit_cot, seed);
  }
  if (kind == "student") {
    auto [student, bridge] = student_from_checkpoint(ck);
    TransformerLM teacher =
        lm_from_checkpoint(load_checkpoint(field_as<std::string>(cfg, "paths.teacher")));
    TrainConfig tc = train_config_from(cfg);
    return evaluate_student_with_teacher(teacher, student, bridge, tc.schedule, test, seed);
  }
  throw ContractError("eval: checkpoint kind '" + kind + "' is not evaluable");
}

int cmd_eval(const CliOptions& opt, json cfg) {
  std::string ckpt_path = field_as<std::string>(cfg, "paths.checkpoint");
  std::string split = cfg.contains("eval") ? cfg["eval"].value("split", "test") : "test";
  Dataset test = load_split(cfg, split);
  uint64_t seed = cfg.contains("train") ? cfg["train"].value("seed", 0ull) : 0ull;

  EvalReport r = eval_checkpoint(cfg, ckpt_path, test, seed);
  fs::create_directories(opt.out_dir);
  std::ofstream os(fs::path(opt.out_dir) / "eval.csv");
  os << eval_csv_header() << "\n" << eval_csv_row(r) << "\n";
  write_manifest(opt, "eval", cfg,
                 {{"report",
                   {{"mode", r.mode},
                    {"exact_match", r.exact_match},
                    {"throughput_eps", r.throughput_eps},
                    {"n", r.n_examples},
                    {"wall_clock_s", r.wall_clock_s}}}});
  std::cout << eval_csv_header() << "\n" << eval_csv_row(r) << "\n";
  return 0;
}

int cmd_bench(const CliOptions& opt, json cfg) {
  std::string split = cfg.contains("eval") ? cfg["eval"].value("split", "test") : "test";
  Dataset test = load_split(cfg, split);
  uint64_t seed = cfg.contains("train") ? cfg["train"].value("seed", 0ull) : 0ull;

  // One row per mode; normalized throughput is relative to the no_cot row.
  std::vector<std::pair<std::string, std::string>> rows_order{
      {"no_cot", "paths.no_cot"},
      {"explicit_cot", "paths.explicit_cot"},
      {"implicit_cot", "paths.coupled"}};
  std::vector<EvalReport> reports;
  double no_cot_eps = 0;
  for (auto& [mode, field] : rows_order) {
    EvalReport r = eval_checkpoint(cfg, field_as<std::string>(cfg, field), test, seed);
    if (mode == "no_cot") no_cot_eps = r.throughput_eps;
    reports.push_back(r);
  }
  for (auto& r : reports) {
    r.normalized_throughput = r.mode == "no_cot" ? 1.0
                              : no_cot_eps > 0   ? r.throughput_eps / no_cot_eps
                                                 : 0.0;
  }
  fs::create_directories(opt.out_dir);
  std::ofstream os(fs::path(opt.out_dir) / "bench.csv");
  os << eval_csv_header() << "\n";
  std::cout << eval_csv_header() << "\n";
  for (const auto& r : reports) {
    os << eval_csv_row(r) << "\n";
    std::cout << eval_csv_row(r) << "\n";
  }
  write_manifest(opt, "bench", cfg, {{"csv", (fs::path(opt.out_dir) / "bench.csv").string()}});
  return 0;
}

int cmd_decode_components(const CliOptions& opt, json cfg) {
  MixtureEmulator emulator =
      emulator_from_checkpoint(load_checkpoint(field_as<std::string>(cfg, "paths.emulator")));
  Dataset data = load_split(cfg, "test");
  int n = std::min<size_t>(data.size(), 8);
  const Vocab& v = Vocab::instance();

  fs::create_directories(opt.out_dir);
  std::ofstream os(fs::path(opt.out_dir) / "components.txt");
  for (int i = 0; i < n; ++i) {
    const MultExample& ex = data[static_cast<size_t>(i)];
    std::vector<int> ids = ex.x;
    ids.push_back(v.sep_ans());
    auto words = emulator.decode_components(ids);
    std::string line = std::to_string(ex.a) + "*" + std::to_string(ex.b) + ":";
    for (const auto& w : words) line += " " + w;
    os << line << "\n";
    std::cout << line << "\n";
  }
  write_manifest(opt, "decode-components", cfg, {{"n", n}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"implicit chain-of-thought distillation lab"};
  app.require_subcommand(1);
  app.fallthrough(false);

  CliOptions opt;
  // Shared options registered on every subcommand.
  std::vector<CLI::App*> subs;
  for (const char* name :
       {"gen-data", "train", "extract-check", "train-student", "train-emulator", "couple",
        "eval", "bench", "decode-components"}) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", opt.config_path, "JSON config file");
    sub->add_option("--out", opt.out_dir, "output directory");
    sub->add_option("--seed", opt.seed, "seed override");
    sub->add_option("--mode", opt.mode, "LM mode override (no_cot|explicit_cot)");
    sub->add_option("--delta", opt.delta, "schedule delta override (number|dynamic)");
    sub->add_option("--variant", opt.variant, "schedule variant override");
    sub->add_option("--temperature", opt.temperature, "couple temperature override");
    sub->add_flag("--mixture,!--no-mixture", opt.mixture, "mixture head on/off");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help() << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n" << app.help() << "\n";
    return 2;
  }

  try {
    json cfg = load_config(opt);
    apply_overrides(cfg, opt);
    std::string sub = app.get_subcommands().front()->get_name();
    if (sub == "gen-data") return cmd_gen_data(opt, cfg);
    if (sub == "train") return cmd_train(opt, cfg);
    if (sub == "extract-check") return cmd_extract_check(opt, cfg);
    if (sub == "train-student") return cmd_train_student(opt, cfg);
    if (sub == "train-emulator") return cmd_train_emulator(opt, cfg);
    if (sub == "couple") return cmd_couple(opt, cfg);
    if (sub == "eval") return cmd_eval(opt, cfg);
    if (sub == "bench") return cmd_bench(opt, cfg);
    if (sub == "decode-components") return cmd_decode_components(opt, cfg);
    std::cerr << "unknown subcommand\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 1;
  } catch (const ParseError& e) {
    std::cerr << "dataset error: " << e.what() << "\n";
    return 1;
  } catch (const ContractError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
