#pragma once

// Orchestration behind the `afss` command: run configuration, overrides,
// run-directory layout and the five subcommands.
//
// Run directory layout (fixed names):
//   config.json                      echo of the effective RunConfig
//   dataset_manifest.json            dataset the run used
//   metrics.json                     per-command results
//   fold<f>/base_model.bin           base-train
//   fold<f>/base_train.jsonl
//   fold<f>/seed<s>/pams.bin         finetune
//   fold<f>/seed<s>/train_log.jsonl
//   fold<f>/seed<s>/finetune_set.json
//   <key>=<value>/                   ablate sub-runs (finetune + evaluate)
//   ablation.json, ablation.md       ablate
//   report.json, report.md, loss_curves.svg   report

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "afss/episodic_engine.hpp"
#include "afss/runtime.hpp"

namespace afss::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum class Command { base_train, finetune, evaluate, ablate, report };
enum class Mode { standard, single_sample };

inline std::string to_string(Command c) {
  switch (c) {
    case Command::base_train: return "base-train";
    case Command::finetune: return "finetune";
    case Command::evaluate: return "evaluate";
    case Command::ablate: return "ablate";
    case Command::report: return "report";
  }
  return "unknown";
}

inline Command parse_command(const std::string& s) {
  for (auto c : {Command::base_train, Command::finetune, Command::evaluate, Command::ablate, Command::report})
    if (to_string(c) == s) return c;
  throw ConfigError("unknown command '" + s + "'");
}

inline std::string to_string(Mode m) { return m == Mode::standard ? "standard" : "single_sample"; }

inline Mode parse_mode(const std::string& s) {
  if (s == "standard") return Mode::standard;
  if (s == "single_sample" || s == "single-sample") return Mode::single_sample;
  throw ConfigError("unknown fine-tuning mode '" + s + "' (expected standard or single_sample)");
}

struct RunConfig {
  Command command = Command::finetune;

  // dataset
  std::uint64_t dataset_seed = 2024;
  std::size_t image_size = 64;
  std::size_t images_per_class = 40;
  std::string manifest;  // when set, overrides the three fields above

  // base model
  std::uint64_t model_seed = 1;  // init seed of fold f is model_seed + f
  std::uint64_t base_seed = 7;   // training seed of fold f is base_seed + f
  std::size_t base_steps = 3000;
  double base_lr = 2e-3;
  std::size_t holdout_per_class = 8;

  // PAM
  double alpha = 0.99;
  double beta = 0.1;
  std::size_t gamma = 16;
  std::string insert = "7-12";
  std::string components = "full";

  // fine-tuning
  Mode mode = Mode::standard;
  std::size_t shots = 1;
  std::size_t samples_per_class = 2;
  std::size_t iterations = 1000;
  std::size_t batch_size = 4;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.001;

  // evaluation
  std::size_t episodes = 300;
  bool reuse_support = false;

  std::vector<std::size_t> folds{0, 1, 2, 3};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};

  std::string base_dir;    // base-train run feeding finetune/evaluate/ablate
  std::string pam_dir;     // finetune run feeding evaluate; empty = frozen baseline
  std::string output_dir = "runs/out";
  std::string label;       // row name in reports
  std::vector<std::string> grid;      // ablate, "key=v1,v2,..."
  std::vector<std::string> run_dirs;  // report

  friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

// Desk-scale benchmark: fewer fine-tuning iterations and evaluation episodes.
inline void apply_desk_preset(RunConfig& c) {
  c.iterations = 200;
  c.episodes = 240;
}

namespace detail {

template <typename T>
std::vector<T> parse_list(const std::string& s, const std::string& key) {
  std::vector<T> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    if (tok.empty()) continue;
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(tok, &used);
      if (used != tok.size()) throw std::invalid_argument(tok);
      out.push_back(static_cast<T>(v));
    } catch (const std::exception&) {
      throw ConfigError("cannot parse '" + tok + "' in " + key);
    }
  }
  return out;
}

inline double parse_double(const std::string& s, const std::string& key) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("cannot parse '" + s + "' as a number for " + key);
  }
}

inline std::size_t parse_size(const std::string& s, const std::string& key) {
  const auto v = parse_list<std::size_t>(s, key);
  if (v.size() != 1) throw ConfigError("expected one integer for " + key + ", got '" + s + "'");
  return v.front();
}

inline bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError("expected true/false for " + key + ", got '" + s + "'");
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (const auto& x : v) out += (out.empty() ? "" : ",") + std::to_string(x);
  return out;
}

}  // namespace detail

// Sets one configuration key from its textual form. Keys use snake_case.
inline void apply_override(RunConfig& c, const std::string& key, const std::string& value) {
  using namespace detail;
  if (key == "command") c.command = parse_command(value);
  else if (key == "preset") {
    if (value != "desk") throw ConfigError("unknown preset '" + value + "' (expected desk)");
    apply_desk_preset(c);
  }
  else if (key == "dataset_seed") c.dataset_seed = parse_size(value, key);
  else if (key == "image_size") c.image_size = parse_size(value, key);
  else if (key == "images_per_class") c.images_per_class = parse_size(value, key);
  else if (key == "manifest") c.manifest = value;
  else if (key == "model_seed") c.model_seed = parse_size(value, key);
  else if (key == "base_seed") c.base_seed = parse_size(value, key);
  else if (key == "base_steps") c.base_steps = parse_size(value, key);
  else if (key == "base_lr") c.base_lr = parse_double(value, key);
  else if (key == "holdout_per_class") c.holdout_per_class = parse_size(value, key);
  else if (key == "alpha") c.alpha = parse_double(value, key);
  else if (key == "beta") c.beta = parse_double(value, key);
  else if (key == "gamma") c.gamma = parse_size(value, key);
  else if (key == "insert") c.insert = value;
  else if (key == "components") c.components = to_string(parse_components(value));
  else if (key == "mode") c.mode = parse_mode(value);
  else if (key == "shots") c.shots = parse_size(value, key);
  else if (key == "samples_per_class") c.samples_per_class = parse_size(value, key);
  else if (key == "iterations") c.iterations = parse_size(value, key);
  else if (key == "batch_size") c.batch_size = parse_size(value, key);
  else if (key == "lr") c.lr = parse_double(value, key);
  else if (key == "momentum") c.momentum = parse_double(value, key);
  else if (key == "weight_decay") c.weight_decay = parse_double(value, key);
  else if (key == "episodes") c.episodes = parse_size(value, key);
  else if (key == "reuse_support") c.reuse_support = parse_bool(value, key);
  else if (key == "folds") c.folds = parse_list<std::size_t>(value, key);
  else if (key == "seeds") c.seeds = parse_list<std::uint64_t>(value, key);
  else if (key == "base_dir") c.base_dir = value;
  else if (key == "pam_dir") c.pam_dir = value;
  else if (key == "output_dir") c.output_dir = value;
  else if (key == "label") c.label = value;
  else throw ConfigError("unknown configuration key '" + key + "'");
}

inline json to_json(const RunConfig& c) {
  return json{
      {"command", to_string(c.command)},
      {"dataset", {{"seed", c.dataset_seed}, {"image_size", c.image_size}, {"images_per_class", c.images_per_class},
                   {"manifest", c.manifest}}},
      {"base", {{"model_seed", c.model_seed}, {"seed", c.base_seed}, {"steps", c.base_steps}, {"lr", c.base_lr},
                {"holdout_per_class", c.holdout_per_class}}},
      {"pam", {{"alpha", c.alpha}, {"beta", c.beta}, {"gamma", c.gamma}, {"insert", c.insert},
               {"components", c.components}}},
      {"finetune", {{"mode", to_string(c.mode)}, {"shots", c.shots}, {"samples_per_class", c.samples_per_class},
                    {"iterations", c.iterations}, {"batch_size", c.batch_size}, {"lr", c.lr},
                    {"momentum", c.momentum}, {"weight_decay", c.weight_decay}}},
      {"evaluate", {{"episodes", c.episodes}, {"reuse_support", c.reuse_support}}},
      {"folds", c.folds},
      {"seeds", c.seeds},
      {"base_dir", c.base_dir},
      {"pam_dir", c.pam_dir},
      {"output_dir", c.output_dir},
      {"label", c.label},
      {"grid", c.grid},
      {"run_dirs", c.run_dirs},
  };
}

// Accepts the nested layout written by to_json; absent keys keep defaults.
inline RunConfig from_json(const json& j, RunConfig c = {}) {
  try {
    auto get = [](const json& o, const char* k, auto& dst) {
      if (o.contains(k)) dst = o.at(k).get<std::decay_t<decltype(dst)>>();
    };
    if (j.contains("preset")) apply_override(c, "preset", j.at("preset").get<std::string>());
    if (j.contains("command")) c.command = parse_command(j.at("command").get<std::string>());
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      get(d, "seed", c.dataset_seed);
      get(d, "image_size", c.image_size);
      get(d, "images_per_class", c.images_per_class);
      get(d, "manifest", c.manifest);
    }
    if (j.contains("base")) {
      const auto& b = j.at("base");
      get(b, "model_seed", c.model_seed);
      get(b, "seed", c.base_seed);
      get(b, "steps", c.base_steps);
      get(b, "lr", c.base_lr);
      get(b, "holdout_per_class", c.holdout_per_class);
    }
    if (j.contains("pam")) {
      const auto& p = j.at("pam");
      get(p, "alpha", c.alpha);
      get(p, "beta", c.beta);
      get(p, "gamma", c.gamma);
      get(p, "insert", c.insert);
      if (p.contains("components")) c.components = to_string(parse_components(p.at("components").get<std::string>()));
    }
    if (j.contains("finetune")) {
      const auto& f = j.at("finetune");
      if (f.contains("mode")) c.mode = parse_mode(f.at("mode").get<std::string>());
      get(f, "shots", c.shots);
      get(f, "samples_per_class", c.samples_per_class);
      get(f, "iterations", c.iterations);
      get(f, "batch_size", c.batch_size);
      get(f, "lr", c.lr);
      get(f, "momentum", c.momentum);
      get(f, "weight_decay", c.weight_decay);
    }
    if (j.contains("evaluate")) {
      get(j.at("evaluate"), "episodes", c.episodes);
      get(j.at("evaluate"), "reuse_support", c.reuse_support);
    }
    get(j, "folds", c.folds);
    get(j, "seeds", c.seeds);
    get(j, "base_dir", c.base_dir);
    get(j, "pam_dir", c.pam_dir);
    get(j, "output_dir", c.output_dir);
    get(j, "label", c.label);
    get(j, "grid", c.grid);
    get(j, "run_dirs", c.run_dirs);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed run configuration: ") + e.what());
  }
  return c;
}

inline RunConfig load_config(const std::string& path, RunConfig defaults = {}) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  try {
    return from_json(json::parse(is), std::move(defaults));
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
}

inline DatasetConfig dataset_config(const RunConfig& c) {
  if (!c.manifest.empty()) return SyntheticDataset::read_manifest(c.manifest);
  DatasetConfig d = DatasetConfig::standard();
  d.seed = c.dataset_seed;
  d.image_size = c.image_size;
  d.images_per_class = c.images_per_class;
  return d;
}

inline PamConfig pam_config(const RunConfig& c, const EncoderLayout& layout, std::size_t n_classes) {
  PamConfig p;
  p.alpha = c.alpha;
  p.beta = c.beta;
  p.gamma = c.gamma;
  p.insert_positions = layout.parse_scheme(c.insert);
  p.n_classes = n_classes;
  p.components = parse_components(c.components);
  for (const auto& pos : p.insert_positions) p.channels.push_back(layout.channels[layout.flat_index(pos) - 1]);
  return p;
}

inline FinetuneBudget budget(const RunConfig& c) {
  FinetuneBudget b;
  b.shots = c.shots;
  b.samples_per_class = c.samples_per_class;
  b.iterations = c.iterations;
  b.batch_size = c.batch_size;
  b.sgd = {c.lr, c.momentum, c.weight_decay};
  return b;
}

inline fs::path base_checkpoint(const std::string& base_dir, std::size_t fold) {
  return fs::path(base_dir) / ("fold" + std::to_string(fold)) / "base_model.bin";
}

inline fs::path seed_dir(const fs::path& run, std::size_t fold, std::uint64_t seed) {
  return run / ("fold" + std::to_string(fold)) / ("seed" + std::to_string(seed));
}

// Values of a grid entry "key=v1,v2". When any ';' is present the list is
// split on ';' instead, so schemes such as "1,3-4" can be swept.
inline std::vector<std::string> grid_values(const std::string& g) {
  const auto eq = g.find('=');
  const std::string rest = g.substr(eq + 1);
  const char sep = rest.find(';') != std::string::npos ? ';' : ',';
  std::vector<std::string> out;
  std::stringstream ss(rest);
  std::string v;
  while (std::getline(ss, v, sep))
    if (!v.empty()) out.push_back(v);
  return out;
}

// Every check that can fail without touching data. Throws ConfigError.
inline void validate(const RunConfig& c) {
  const DatasetConfig d = dataset_config(c);
  d.validate();
  if (c.command == Command::report) {
    if (c.run_dirs.empty()) throw ConfigError("report needs at least one run directory");
    return;
  }
  if (c.output_dir.empty()) throw ConfigError("output_dir must be set");
  if (c.folds.empty()) throw ConfigError("at least one fold is required");
  for (std::size_t f : c.folds)
    if (f >= d.folds) throw ConfigError("fold " + std::to_string(f) + " outside [0, " + std::to_string(d.folds) + ")");
  ModelConfig mc;
  mc.validate();
  if (c.command == Command::base_train) {
    if (c.base_steps == 0) throw ConfigError("base_steps must be >= 1");
    if (!(c.base_lr > 0)) throw ConfigError("base_lr must be > 0");
    if (c.holdout_per_class + 2 > d.images_per_class) throw ConfigError("holdout leaves too few base training images");
    return;
  }
  if (c.seeds.empty()) throw ConfigError("at least one seed is required");
  if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size()) {
    throw ConfigError("seeds must be distinct");
  }
  if (c.base_dir.empty()) throw ConfigError(to_string(c.command) + " needs base_dir (a base-train run)");
  for (std::size_t f : c.folds) {
    if (!fs::exists(base_checkpoint(c.base_dir, f))) {
      throw ConfigError("missing base checkpoint " + base_checkpoint(c.base_dir, f).string());
    }
  }
  const PamConfig p = pam_config(c, mc.layout(), d.classes.size());
  p.validate();
  if (p.insert_positions.empty() && c.command != Command::evaluate) {
    throw ConfigError("insert scheme selects no layers");
  }
  if (c.mode == Mode::standard) {
    budget(c).validate();
  } else if (c.batch_size == 0) {
    throw ConfigError("finetune: batch_size must be >= 1");
  }
  if (!(c.lr >= 0) || !(c.momentum >= 0) || !(c.weight_decay >= 0)) {
    throw ConfigError("optimizer hyperparameters must be non-negative");
  }
  const std::size_t per_class = c.mode == Mode::single_sample ? 1 : c.samples_per_class;
  if (per_class >= d.images_per_class) throw ConfigError("samples_per_class leaves no evaluation images");
  if (c.iterations == 0) throw ConfigError("iterations must be >= 1");
  if (c.episodes == 0) throw ConfigError("episodes must be >= 1");
  if (c.command == Command::evaluate && !c.pam_dir.empty()) {
    for (std::size_t f : c.folds)
      for (std::uint64_t s : c.seeds)
        if (!fs::exists(seed_dir(c.pam_dir, f, s) / "pams.bin")) {
          throw ConfigError("missing PAM checkpoint " + (seed_dir(c.pam_dir, f, s) / "pams.bin").string());
        }
  }
  if (c.command == Command::ablate) {
    if (c.grid.empty()) throw ConfigError("ablate needs --grid key=v1,v2,...");
    for (const auto& g : c.grid) {
      const auto eq = g.find('=');
      if (eq == std::string::npos || eq == 0 || eq + 1 == g.size()) throw ConfigError("malformed grid '" + g + "'");
      RunConfig probe = c;
      const auto values = grid_values(g);
      if (values.empty()) throw ConfigError("grid '" + g + "' lists no values");
      for (const auto& v : values) {
        apply_override(probe, g.substr(0, eq), v);
        probe.command = Command::finetune;
        validate(probe);
      }
    }
  }
}

// ------------------------------------------------------------------- output

inline void write_json(const fs::path& p, const json& j) {
  fs::create_directories(p.parent_path());
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << j.dump(2) << '\n';
}

inline json read_json(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  return json::parse(is);
}

inline void write_log(const fs::path& p, const std::vector<TrainLogEntry>& log) {
  fs::create_directories(p.parent_path());
  std::ofstream os(p);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  for (const auto& e : log) {
    os << json{{"iteration", e.iteration}, {"loss", e.loss}, {"lr", e.lr}, {"episodes", e.episodes}}.dump() << '\n';
  }
}

inline std::vector<TrainLogEntry> read_log(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw std::runtime_error("cannot read " + p.string());
  std::vector<TrainLogEntry> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    out.push_back({j.at("iteration").get<std::size_t>(), j.at("loss").get<double>(), j.at("lr").get<double>(),
                   j.value("episodes", std::size_t{0})});
  }
  return out;
}

inline json to_json(const FinetuneSet& s) {
  json by = json::object();
  for (const auto& [c, ids] : s.by_class) by[std::to_string(c)] = ids;
  return {{"fold", s.fold}, {"by_class", by}};
}

inline FinetuneSet finetune_set_from_json(const json& j) {
  FinetuneSet s;
  s.fold = j.at("fold").get<std::size_t>();
  for (const auto& [k, v] : j.at("by_class").items()) s.by_class[std::stoul(k)] = v.get<std::vector<std::size_t>>();
  return s;
}

inline json to_json(const EvalReport& r) {
  json classes = json::array();
  for (const auto& c : r.classes) {
    classes.push_back({{"class_id", c.class_id}, {"iou", c.iou()}, {"intersection", c.intersection},
                       {"union", c.union_}, {"episodes", c.episodes}});
  }
  auto ids = [](const std::set<std::size_t>& s) { return std::vector<std::size_t>(s.begin(), s.end()); };
  return {{"fold", r.fold},
          {"shots", r.shots},
          {"reuse_support", r.reuse},
          {"miou", r.miou},
          {"classes", classes},
          {"audit", {{"finetune_ids", ids(r.audit.finetune_ids)},
                     {"query_ids", ids(r.audit.query_ids)},
                     {"support_ids", ids(r.audit.support_ids)},
                     {"leakage_free", r.audit.leakage_free(r.reuse)},
                     {"supports_within_finetune_set", r.audit.supports_within_finetune_set()}}}};
}

// ---------------------------------------------------------------- commands

struct Context {
  RunConfig config;
  SyntheticDataset dataset;
  std::ostream& log;
};

inline void prepare_run_dir(const Context& ctx) {
  const fs::path out(ctx.config.output_dir);
  fs::create_directories(out);
  write_json(out / "config.json", to_json(ctx.config));
  ctx.dataset.write_manifest((out / "dataset_manifest.json").string());
}

inline Model load_base(const RunConfig& c, std::size_t fold) {
  Model m = Model::load(base_checkpoint(c.base_dir, fold).string());
  m.freeze(true);
  return m;
}

inline json cmd_base_train(Context& ctx) {
  const RunConfig& c = ctx.config;
  const fs::path out(c.output_dir);
  json folds = json::array();
  for (std::size_t f : c.folds) {
    Model model(ModelConfig{}, c.model_seed + f);
    BaseTrainOptions opt;
    opt.steps = c.base_steps;
    opt.adam.lr = c.base_lr;
    opt.holdout_per_class = c.holdout_per_class;
    ctx.log << "base-train fold " << f << ": " << opt.steps << " steps\n";
    const auto log = base_train(model, ctx.dataset, f, opt, c.base_seed + f, [&](const TrainLogEntry& e) {
      if (e.iteration % 500 == 0) ctx.log << "  step " << e.iteration << " loss " << e.loss << '\n';
    });
    const fs::path dir = out / ("fold" + std::to_string(f));
    fs::create_directories(dir);
    model.save((dir / "base_model.bin").string());
    write_log(dir / "base_train.jsonl", log);

    const auto episodes = plan_base_holdout_episodes(ctx.dataset, f, c.holdout_per_class, 1, 180, c.base_seed + f);
    const EvalReport held = evaluate_episodes(model, nullptr, ctx.dataset, episodes);
    IouAccumulator trivial;  // probability 0.5 everywhere, thresholded at 0.5: all foreground
    for (const auto& ep : episodes) {
      const auto& m = ctx.dataset.sample(ep.query_id).mask;
      Tensor<float> ones(m.shape());
      ones.fill(1.f);
      trivial.add(ep.class_id, ones, m);
    }
    folds.push_back({{"fold", f}, {"holdout_miou", held.miou}, {"trivial_miou", trivial.miou()},
                     {"weight_hash", model.weight_hash()}, {"parameters", model.parameter_count()}});
    ctx.log << "  held-out base mIoU " << held.miou << " (trivial " << trivial.miou() << ")\n";
  }
  return {{"kind", "base-train"}, {"folds", folds}};
}

// Fine-tunes every (fold, seed) into `out`; returns per-run parameter counts.
inline json finetune_into(const RunConfig& c, const SyntheticDataset& ds, const fs::path& out, std::ostream& log) {
  json runs = json::array();
  std::size_t pam_params = 0, model_params = 0;
  for (std::size_t f : c.folds) {
    Model model = load_base(c, f);
    model_params = model.parameter_count();
    const PamConfig pc = pam_config(c, model.layout(), ds.config().classes.size());
    for (std::uint64_t s : c.seeds) {
      Pams pams = insert_pams<float>(model, pc, s);
      pam_params = pams.trainable_parameter_count();
      FinetuneResult r;
      if (c.mode == Mode::standard) {
        r = finetune(model, pams, ds, f, budget(c), s);
      } else {
        r = finetune_single_sample(model, pams, ds, f, budget(c), s, AugmentRanges{}, nullptr,
                                   [&log](const std::string& w) { log << "warning: " << w << '\n'; });
      }
      const fs::path dir = seed_dir(out, f, s);
      fs::create_directories(dir);
      pams.save((dir / "pams.bin").string());
      write_log(dir / "train_log.jsonl", r.log);
      write_json(dir / "finetune_set.json", to_json(r.set));
      runs.push_back({{"fold", f}, {"seed", s}, {"final_loss", r.log.empty() ? 0.0 : r.log.back().loss},
                      {"skipped_episodes", r.skipped_episodes}, {"weight_hash", pams.weight_hash()}});
      log << "finetune fold " << f << " seed " << s << ": final loss " << (r.log.empty() ? 0.0 : r.log.back().loss)
          << '\n';
    }
  }
  return {{"kind", "finetune"},
          {"runs", runs},
          {"pam_parameters", pam_params},
          {"model_parameters", model_params},
          {"pam_fraction", static_cast<double>(pam_params) / static_cast<double>(pam_params + model_params)}};
}

inline json cmd_finetune(Context& ctx) {
  return finetune_into(ctx.config, ctx.dataset, ctx.config.output_dir, ctx.log);
}

// Evaluates PAMs from `pam_dir` (or the frozen baseline when empty) over
// every (fold, seed). The baseline excludes the same fine-tuning images the
// adapted run would have used, so both see identical episodes.
inline json evaluate_from(const RunConfig& c, const SyntheticDataset& ds, const std::string& pam_dir,
                          std::ostream& log) {
  const bool baseline = pam_dir.empty();
  RunConfig pam_cfg = c;
  if (!baseline) pam_cfg = from_json(read_json(fs::path(pam_dir) / "config.json"));
  json results = json::array();
  std::size_t pam_params = 0, model_params = 0;
  for (std::size_t f : c.folds) {
    Model model = load_base(c, f);
    model_params = model.parameter_count();
    for (std::uint64_t s : c.seeds) {
      FinetuneSet set;
      std::optional<Pams> pams;
      if (baseline) {
        set = select_finetune_set(ds, f, c.mode == Mode::single_sample ? 1 : c.samples_per_class, s);
      } else {
        const fs::path dir = seed_dir(pam_dir, f, s);
        set = finetune_set_from_json(read_json(dir / "finetune_set.json"));
        const PamConfig pc = pam_config(pam_cfg, model.layout(), ds.config().classes.size());
        pams = Pams::load((dir / "pams.bin").string(), pc, model.layout(), PamMode::test);
        pam_params = pams->trainable_parameter_count();
      }
      EvalOptions opt;
      opt.shots = c.shots;
      opt.episodes = c.episodes;
      opt.seed = s;
      opt.reuse_finetune_set_as_support = c.reuse_support;
      const EvalReport r = evaluate(model, pams ? &*pams : nullptr, ds, f, opt, &set);
      json entry = to_json(r);
      entry["seed"] = s;
      results.push_back(entry);
      log << "evaluate fold " << f << " seed " << s << ": mIoU " << r.miou << (baseline ? " (baseline)" : "") << '\n';
    }
  }
  std::string label = c.label;
  if (label.empty()) label = baseline ? "baseline" : pam_cfg.components + "@" + pam_cfg.insert;
  return {{"kind", "evaluate"},
          {"label", label},
          {"baseline", baseline},
          {"pam_dir", pam_dir},
          {"reuse_support", c.reuse_support},
          {"pam_parameters", pam_params},
          {"model_parameters", model_params},
          {"pam_fraction",
           model_params ? static_cast<double>(pam_params) / static_cast<double>(pam_params + model_params) : 0.0},
          {"results", results}};
}

inline json cmd_evaluate(Context& ctx) { return evaluate_from(ctx.config, ctx.dataset, ctx.config.pam_dir, ctx.log); }

// ------------------------------------------------------------------ tables

struct Summary {
  std::string label;
  bool baseline = false;
  std::map<std::size_t, std::vector<double>> per_fold;  // fold -> mIoU per seed
  std::map<std::uint64_t, std::vector<double>> per_seed;
  std::size_t pam_parameters = 0;
  double pam_fraction = 0.0;
  std::string pam_dir;

  double fold_mean(std::size_t f) const {
    const auto& v = per_fold.at(f);
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  }
  double mean() const {
    double s = 0;
    for (const auto& [f, v] : per_fold) s += fold_mean(f);
    return per_fold.empty() ? 0.0 : s / static_cast<double>(per_fold.size());
  }
  // Sample std over seeds of the fold-averaged mIoU.
  double std_over_seeds() const {
    std::vector<double> m;
    for (const auto& [s, v] : per_seed) m.push_back(std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()));
    if (m.size() < 2) return 0.0;
    const double mu = std::accumulate(m.begin(), m.end(), 0.0) / static_cast<double>(m.size());
    double ss = 0;
    for (double x : m) ss += (x - mu) * (x - mu);
    return std::sqrt(ss / static_cast<double>(m.size() - 1));
  }
};

inline Summary summarize(const json& metrics) {
  Summary s;
  s.label = metrics.at("label").get<std::string>();
  s.baseline = metrics.at("baseline").get<bool>();
  s.pam_parameters = metrics.at("pam_parameters").get<std::size_t>();
  s.pam_fraction = metrics.at("pam_fraction").get<double>();
  s.pam_dir = metrics.value("pam_dir", "");
  for (const auto& r : metrics.at("results")) {
    const double m = r.at("miou").get<double>();
    s.per_fold[r.at("fold").get<std::size_t>()].push_back(m);
    s.per_seed[r.at("seed").get<std::uint64_t>()].push_back(m);
  }
  return s;
}

inline std::string fmt_pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << 100.0 * v;
  return os.str();
}

// Markdown table: one row per summary, per-fold columns, mean, std, delta vs the
// first baseline row, PAM parameter count and fraction.
inline std::string comparison_table(const std::vector<Summary>& rows, const std::string& first_column = "Run") {
  std::set<std::size_t> folds;
  for (const auto& r : rows)
    for (const auto& [f, v] : r.per_fold) folds.insert(f);
  const Summary* base = nullptr;
  for (const auto& r : rows)
    if (r.baseline) {
      base = &r;
      break;
    }
  std::ostringstream os;
  os << "| " << first_column << " |";
  for (std::size_t f : folds) os << " Fold-" << f << " |";
  os << " Mean | Std | Δ | PAM params | Fraction |\n|---|";
  for (std::size_t i = 0; i < folds.size() + 5; ++i) os << "---|";
  os << '\n';
  for (const auto& r : rows) {
    os << "| " << r.label << " |";
    for (std::size_t f : folds) os << ' ' << (r.per_fold.count(f) ? fmt_pct(r.fold_mean(f)) : "-") << " |";
    os << ' ' << fmt_pct(r.mean()) << " | " << fmt_pct(r.std_over_seeds()) << " | "
       << (base ? (r.mean() >= base->mean() ? "+" : "") + fmt_pct(r.mean() - base->mean()) : "-") << " | "
       << r.pam_parameters << " | " << std::setprecision(3) << 100.0 * r.pam_fraction << "% |\n";
  }
  return os.str();
}

inline json summary_json(const Summary& s, const Summary* base) {
  json folds = json::object();
  for (const auto& [f, v] : s.per_fold) folds[std::to_string(f)] = {{"mean", s.fold_mean(f)}, {"seeds", v}};
  json j{{"label", s.label}, {"baseline", s.baseline}, {"folds", folds}, {"mean", s.mean()},
         {"std", s.std_over_seeds()}, {"pam_parameters", s.pam_parameters}, {"pam_fraction", s.pam_fraction}};
  j["delta"] = base ? json(s.mean() - base->mean()) : json(nullptr);
  return j;
}

// ------------------------------------------------------------------- plots

struct Series {
  std::string name;
  std::vector<double> y;  // x = 1..n
};

// Static SVG line plot.
inline std::string svg_line_plot(const std::string& title, const std::vector<Series>& series) {
  const double W = 720, H = 420, L = 60, R = 180, T = 40, B = 50;
  double ymin = 1e300, ymax = -1e300;
  std::size_t n = 1;
  for (const auto& s : series) {
    for (double v : s.y) {
      ymin = std::min(ymin, v);
      ymax = std::max(ymax, v);
    }
    n = std::max(n, s.y.size());
  }
  if (ymin > ymax) ymin = 0, ymax = 1;
  if (ymax - ymin < 1e-12) ymax = ymin + 1;
  auto px = [&](double i) { return L + (W - L - R) * (n > 1 ? i / static_cast<double>(n - 1) : 0.0); };
  auto py = [&](double v) { return T + (H - T - B) * (1.0 - (v - ymin) / (ymax - ymin)); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << L << "\" y=\"24\" font-size=\"15\">" << title << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = ymin + (ymax - ymin) * t / 4.0;
    os << "<text x=\"" << L - 6 << "\" y=\"" << py(v) + 4 << "\" text-anchor=\"end\">" << std::setprecision(3) << v
       << "</text>\n" << std::setprecision(2);
  }
  os << "<text x=\"" << L << "\" y=\"" << H - B + 18 << "\">1</text>\n";
  os << "<text x=\"" << W - R << "\" y=\"" << H - B + 18 << "\" text-anchor=\"end\">" << n << "</text>\n";
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">iteration</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const char* col = colors[i % 8];
    os << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t k = 0; k < series[i].y.size(); ++k) os << px(static_cast<double>(k)) << ',' << py(series[i].y[k]) << ' ';
    os << "\"/>\n";
    os << "<text x=\"" << W - R + 10 << "\" y=\"" << T + 16 * (i + 1) << "\" fill=\"" << col << "\">" << series[i].name
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

// Mean fine-tuning loss curve over every train_log.jsonl under a finetune run,
// smoothed by a trailing window.
inline std::optional<Series> loss_curve(const fs::path& finetune_dir, const std::string& name, std::size_t window = 20) {
  std::vector<double> sum;
  std::vector<std::size_t> cnt;
  if (!fs::exists(finetune_dir)) return std::nullopt;
  for (const auto& e : fs::recursive_directory_iterator(finetune_dir)) {
    if (e.path().filename() != "train_log.jsonl") continue;
    const auto log = read_log(e.path());
    if (sum.size() < log.size()) {
      sum.resize(log.size(), 0.0);
      cnt.resize(log.size(), 0);
    }
    for (std::size_t i = 0; i < log.size(); ++i) {
      sum[i] += log[i].loss;
      ++cnt[i];
    }
  }
  if (sum.empty()) return std::nullopt;
  Series s{name, {}};
  double acc = 0;
  std::vector<double> raw(sum.size());
  for (std::size_t i = 0; i < sum.size(); ++i) raw[i] = sum[i] / static_cast<double>(cnt[i]);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    acc += raw[i];
    if (i >= window) acc -= raw[i - window];
    s.y.push_back(acc / static_cast<double>(std::min(i + 1, window)));
  }
  return s;
}

inline json cmd_report(const RunConfig& c, std::ostream& log) {
  std::vector<Summary> rows;
  std::vector<Series> curves;
  for (const auto& dir : c.run_dirs) {
    const fs::path m = fs::path(dir) / "metrics.json";
    json metrics;
    try {
      metrics = read_json(m);
      if (metrics.value("kind", "") != "evaluate") throw std::runtime_error("not an evaluate run");
      rows.push_back(summarize(metrics));
    } catch (const std::exception& e) {
      log << "warning: skipping incomplete run directory " << dir << " (" << e.what() << ")\n";
      continue;
    }
    if (!rows.back().pam_dir.empty()) {
      if (auto s = loss_curve(rows.back().pam_dir, rows.back().label)) curves.push_back(*s);
    }
  }
  if (rows.empty()) throw ContractError("report: no completed run directories");
  const Summary* base = nullptr;
  for (const auto& r : rows)
    if (r.baseline) {
      base = &r;
      break;
    }
  json table = json::array();
  for (const auto& r : rows) table.push_back(summary_json(r, base));
  const fs::path out(c.output_dir);
  fs::create_directories(out);
  std::ofstream(out / "report.md") << comparison_table(rows);
  std::ofstream(out / "loss_curves.svg") << svg_line_plot("Fine-tuning loss (mean over folds and seeds)", curves);
  log << comparison_table(rows);
  return {{"kind", "report"}, {"rows", table}, {"plots", {"loss_curves.svg"}}};
}

inline json cmd_ablate(Context& ctx) {
  const RunConfig& c = ctx.config;
  const fs::path out(c.output_dir);
  json merged = json::array();
  std::ostringstream md;
  for (const auto& g : c.grid) {
    const auto eq = g.find('=');
    const std::string key = g.substr(0, eq);
    std::vector<Summary> rows;
    for (const auto& v : grid_values(g)) {
      RunConfig sub = c;
      apply_override(sub, key, v);
      sub.command = Command::finetune;
      sub.grid.clear();
      sub.output_dir = (out / (key + "=" + v)).string();
      sub.label = key + "=" + v;
      fs::create_directories(sub.output_dir);
      write_json(fs::path(sub.output_dir) / "config.json", to_json(sub));
      ctx.log << "ablate " << key << "=" << v << '\n';
      json ft = finetune_into(sub, ctx.dataset, sub.output_dir, ctx.log);
      write_json(fs::path(sub.output_dir) / "finetune.json", ft);
      json ev = evaluate_from(sub, ctx.dataset, sub.output_dir, ctx.log);
      ev["label"] = v;
      write_json(fs::path(sub.output_dir) / "metrics.json", ev);
      rows.push_back(summarize(ev));
      merged.push_back({{"key", key}, {"value", v}, {"summary", summary_json(rows.back(), nullptr)}});
    }
    md << "### " << key << "\n\n" << comparison_table(rows, key) << '\n';
  }
  std::ofstream(out / "ablation.md") << md.str();
  write_json(out / "ablation.json", merged);
  ctx.log << md.str();
  return {{"kind", "ablate"}, {"rows", merged}};
}

enum ExitCode : int { kSuccess = 0, kValidationError = 1, kRuntimeError = 2 };

// Validates, then executes. Validation failures return 1 before any compute;
// failures while running return 2.
inline int run(const RunConfig& config, std::ostream& log = std::cerr) {
  try {
    validate(config);
  } catch (const std::exception& e) {
    log << "error: invalid configuration: " << e.what() << '\n';
    return kValidationError;
  }
  try {
    enable_flush_to_zero();
    if (config.command == Command::report) {
      const json r = cmd_report(config, log);
      write_json(fs::path(config.output_dir) / "report.json", r);
      write_json(fs::path(config.output_dir) / "config.json", to_json(config));
      return kSuccess;
    }
    Context ctx{config, SyntheticDataset(dataset_config(config)), log};
    prepare_run_dir(ctx);
    json metrics;
    switch (config.command) {
      case Command::base_train: metrics = cmd_base_train(ctx); break;
      case Command::finetune: metrics = cmd_finetune(ctx); break;
      case Command::evaluate: metrics = cmd_evaluate(ctx); break;
      case Command::ablate: metrics = cmd_ablate(ctx); break;
      case Command::report: break;
    }
    write_json(fs::path(config.output_dir) / (config.command == Command::finetune ? "finetune.json" : "metrics.json"),
               metrics);
    return kSuccess;
  } catch (const std::exception& e) {
    log << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
}

}  // namespace afss::cli
