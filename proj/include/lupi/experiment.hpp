///
/// \file experiment.hpp
/// \brief End-to-end experiment driver behind the command-line tool:
///        declarative configs, corpus generation and ingestion, alpha sweeps,
///        model comparisons and report emission.
///
#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lupi/common.hpp"
#include "lupi/corpus_io.hpp"
#include "lupi/evaluation.hpp"
#include "lupi/synthetic.hpp"

namespace lupi {

inline constexpr const char* kToolVersion = "1.0.0";
inline constexpr const char* kRunsRootEnv = "LUPI_RUNS_ROOT";

/// Raised when a stage needs results that an earlier stage has not produced.
class MissingStageError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

// ---------------------------------------------------------------------------
// Declarative config schema
//
// Each config struct exposes `visit(V&)`, listing its fields once. Reader,
// writer and schema printer are visitors over that list.

namespace schema {

using nlohmann::json;

template <typename T>
std::string type_name() {
  if constexpr (std::is_same_v<T, bool>) return "boolean";
  else if constexpr (std::is_integral_v<T>) return "integer";
  else if constexpr (std::is_floating_point_v<T>) return "number";
  else if constexpr (std::is_same_v<T, std::string>) return "string";
  else if constexpr (std::is_same_v<T, std::vector<double>>) return "array of numbers";
  else if constexpr (std::is_same_v<T, std::vector<int>>) return "array of integers";
  else if constexpr (std::is_same_v<T, std::vector<std::string>>) return "array of strings";
  else if constexpr (std::is_same_v<T, std::optional<double>>) return "number or null";
  else if constexpr (std::is_same_v<T, std::optional<std::string>>) return "string or null";
  else if constexpr (std::is_same_v<T, LabelRange>) return "[lo, hi]";
  else return "value";
}

template <typename T>
bool matches(const json& j) {
  if constexpr (std::is_same_v<T, bool>) return j.is_boolean();
  else if constexpr (std::is_unsigned_v<T>) return j.is_number_unsigned() || (j.is_number_integer() && j.get<std::int64_t>() >= 0);
  else if constexpr (std::is_integral_v<T>) return j.is_number_integer();
  else if constexpr (std::is_floating_point_v<T>) return j.is_number();
  else if constexpr (std::is_same_v<T, std::string>) return j.is_string();
  else if constexpr (std::is_same_v<T, std::vector<double>>)
    return j.is_array() && std::all_of(j.begin(), j.end(), [](const json& e) { return e.is_number(); });
  else if constexpr (std::is_same_v<T, std::vector<int>>)
    return j.is_array() && std::all_of(j.begin(), j.end(), [](const json& e) { return e.is_number_integer(); });
  else if constexpr (std::is_same_v<T, std::vector<std::string>>)
    return j.is_array() && std::all_of(j.begin(), j.end(), [](const json& e) { return e.is_string(); });
  else if constexpr (std::is_same_v<T, std::optional<double>>) return j.is_null() || j.is_number();
  else if constexpr (std::is_same_v<T, std::optional<std::string>>) return j.is_null() || j.is_string();
  else if constexpr (std::is_same_v<T, LabelRange>) return j.is_array() && j.size() == 2 && j[0].is_number() && j[1].is_number();
  else return false;
}

template <typename T>
json encode(const T& v) {
  if constexpr (std::is_same_v<T, std::optional<double>> || std::is_same_v<T, std::optional<std::string>>)
    return v ? json(*v) : json(nullptr);
  else if constexpr (std::is_same_v<T, LabelRange>) return json::array({v.lo, v.hi});
  else return json(v);
}

template <typename T>
T decode(const json& j) {
  if constexpr (std::is_same_v<T, std::optional<double>>)
    return j.is_null() ? std::nullopt : std::optional<double>(j.get<double>());
  else if constexpr (std::is_same_v<T, std::optional<std::string>>)
    return j.is_null() ? std::nullopt : std::optional<std::string>(j.get<std::string>());
  else if constexpr (std::is_same_v<T, LabelRange>) return LabelRange{j[0].get<double>(), j[1].get<double>()};
  else return j.get<T>();
}

inline std::string join_path(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

/// Fills a struct from JSON; missing required fields, unknown fields and type
/// mismatches raise ConfigError naming the offending field.
class Reader {
 public:
  Reader(const json& j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {
    if (!j_.is_object())
      throw ConfigError("config" + (prefix_.empty() ? "" : " field '" + prefix_ + "'") + " must be a JSON object");
  }

  template <typename T>
  void field(const char* key, T& ref, bool required, const char*) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) {
      if (required) throw ConfigError("config is missing required field '" + join_path(prefix_, key) + "'");
      return;
    }
    if (!matches<T>(*it))
      throw ConfigError("config field '" + join_path(prefix_, key) + "' must be " + type_name<T>());
    ref = decode<T>(*it);
  }

  template <typename S>
  void object(const char* key, S& ref, bool required, const char*) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) {
      if (required) throw ConfigError("config is missing required field '" + join_path(prefix_, key) + "'");
      return;
    }
    Reader sub(*it, join_path(prefix_, key));
    ref.visit(sub);
    sub.finish();
  }

  template <typename S>
  void optional_object(const char* key, std::optional<S>& ref, const char*) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return;
    ref.emplace();
    Reader sub(*it, join_path(prefix_, key));
    ref->visit(sub);
    sub.finish();
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key)) throw ConfigError("config has unknown field '" + join_path(prefix_, key) + "'");
  }

 private:
  const json& j_;
  std::string prefix_;
  std::set<std::string> seen_;
};

class Writer {
 public:
  json out = json::object();

  template <typename T>
  void field(const char* key, const T& ref, bool, const char*) {
    out[key] = encode(ref);
  }
  template <typename S>
  void object(const char* key, const S& ref, bool, const char*) {
    Writer sub;
    const_cast<S&>(ref).visit(sub);
    out[key] = sub.out;
  }
  template <typename S>
  void optional_object(const char* key, const std::optional<S>& ref, const char*) {
    if (!ref) return;
    Writer sub;
    const_cast<S&>(*ref).visit(sub);
    out[key] = sub.out;
  }
};

class Describer {
 public:
  json out = json::object();

  template <typename T>
  void field(const char* key, const T& ref, bool required, const char* doc) {
    json f = {{"type", type_name<T>()}, {"required", required}, {"description", doc}};
    if (!required) f["default"] = encode(ref);
    out[key] = std::move(f);
  }
  template <typename S>
  void object(const char* key, const S& ref, bool required, const char* doc) {
    Describer sub;
    const_cast<S&>(ref).visit(sub);
    out[key] = {{"type", "object"}, {"required", required}, {"description", doc}, {"fields", sub.out}};
  }
  template <typename S>
  void optional_object(const char* key, const std::optional<S>&, const char* doc) {
    S defaults;
    Describer sub;
    defaults.visit(sub);
    out[key] = {{"type", "object or null"}, {"required", false}, {"description", doc}, {"fields", sub.out}};
  }
};

template <typename S>
S parse(const json& j, const std::string& prefix = "") {
  S s;
  Reader r(j, prefix);
  s.visit(r);
  r.finish();
  return s;
}

template <typename S>
json dump(const S& s) {
  Writer w;
  const_cast<S&>(s).visit(w);
  return w.out;
}

template <typename S>
json describe() {
  S s;
  Describer d;
  s.visit(d);
  return d.out;
}

}  // namespace schema

// ---------------------------------------------------------------------------
// Config structs

/// Generator parameters as a declarative config.
struct GeneratorSettings {
  GeneratorConfig g;

  template <typename V>
  void visit(V& v) {
    v.field("seed", g.seed, true, "master seed of the corpus");
    v.field("n_participants", g.n_participants, true, "number of participants (one session each)");
    v.field("session_duration", g.session_duration, true, "session length in seconds");
    v.field("latent_smoothness", g.latent_smoothness, false, "AR(1) coefficient of the latent increments");
    v.field("latent_volatility", g.latent_volatility, false, "per-tick standard deviation of the latent walk");
    v.field("privileged_noise_std", g.privileged_noise_std, false, "noise on privileged features");
    v.field("pixel_noise_std", g.pixel_noise_std, false, "noise on pixel intensities");
    v.field("privileged_dim", g.privileged_dim, false, "total privileged feature dimension");
    v.field("frame_height", g.frame_height, false, "frame rows");
    v.field("frame_width", g.frame_width, false, "frame columns");
    v.field("native_fps", g.native_fps, false, "native video frame rate");
    v.field("frame_skip", g.frame_skip, false, "keep every n-th frame when stacking");
    v.field("n_annotators", g.n_annotators, false, "annotators per session");
    v.field("annotator_noise_std", g.annotator_noise_std, false, "per-tick annotator noise");
    v.field("annotator_bias_std", g.annotator_bias_std, false, "per-annotator constant offset");
    v.field("appearance_variability", g.appearance_variability, false, "between-participant appearance spread");
    v.field("label_range", g.label_range, false, "closed label interval");
  }
};

struct TrainSettings {
  TrainConfig t;
  std::string monitor = "blended";

  template <typename V>
  void visit(V& v) {
    v.field("learning_rate", t.learning_rate, false, "Adam learning rate");
    v.field("batch_size", t.batch_size, false, "mini-batch size");
    v.field("max_epochs", t.max_epochs, false, "epoch cap");
    v.field("patience", t.patience, false, "early-stopping patience in epochs");
    v.field("val_fraction", t.val_fraction, false, "share of training windows held out for validation");
    v.field("seed", t.seed, false, "training master seed");
    v.field("monitor", monitor, false, "student early-stopping loss: blended | task");
  }
};

struct ModelSettings {
  int penultimate_dim = 96;
  double dropout_rate = 0.10;
  std::vector<int> conv_filters{32, 48, 64, 96};

  template <typename V>
  void visit(V& v) {
    v.field("penultimate_dim", penultimate_dim, false, "width of the penultimate layer (shared by all models)");
    v.field("dropout_rate", dropout_rate, false, "dropout on the pixel trunk");
    v.field("conv_filters", conv_filters, false, "filters of the four convolution blocks");
  }
};

struct FoldSettings {
  int k = 5;
  int sweep_repeats = 1;
  int compare_repeats = 5;
  std::uint64_t seed = 1;

  template <typename V>
  void visit(V& v) {
    v.field("k", k, false, "number of participant-grouped folds");
    v.field("sweep_repeats", sweep_repeats, false, "CV repeats in the alpha sweep");
    v.field("compare_repeats", compare_repeats, false, "CV repeats in the model comparison");
    v.field("seed", seed, false, "fold plan seed");
  }
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::optional<std::string> corpus;
  std::optional<GeneratorSettings> generator;
  std::string profile;
  std::string task = "classification";
  std::string dimension = "arousal";
  std::vector<double> window_lengths{1.0, 2.0, 3.0};
  double step = 0.4;
  std::vector<double> alphas{0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<std::string> teachers{"privnet", "fusionnet"};
  std::vector<std::string> models{"pixelnet", "privnet", "fusionnet", "student"};
  double epsilon = 0.1;
  std::optional<double> split_t;
  TrainSettings train;
  ModelSettings model;
  FoldSettings folds;
  int jobs = 1;

  template <typename V>
  void visit(V& v) {
    v.field("name", name, true, "experiment name; results go to <runs root>/<name>");
    v.field("corpus", corpus, false, "corpus directory (adapter format); exclusive with generator");
    v.optional_object("generator", generator, "in-memory synthetic corpus; exclusive with corpus");
    v.field("profile", profile, false, "reference modality table to check an ingested corpus against: recola | sewa");
    v.field("task", task, true, "classification | regression");
    v.field("dimension", dimension, false, "annotation target: arousal | valence");
    v.field("window_lengths", window_lengths, true, "window lengths in seconds");
    v.field("step", step, false, "window step in seconds");
    v.field("alphas", alphas, true, "student blend weights in [0,1]");
    v.field("teachers", teachers, true, "teacher models: privnet | fusionnet");
    v.field("models", models, false, "models compared: pixelnet | privnet | fusionnet | student");
    v.field("epsilon", epsilon, false, "half-width of the discarded band around the split point");
    v.field("split_t", split_t, false, "fixed split point; null uses the training median per fold");
    v.object("train", train, false, "optimizer and early stopping");
    v.object("model", model, false, "architecture widths");
    v.object("folds", folds, false, "cross-validation plan");
    v.field("jobs", jobs, false, "cells trained in parallel");
  }

  [[nodiscard]] Task task_kind() const { return parse_task(task); }
  [[nodiscard]] Monitor monitor() const { return train.monitor == "task" ? Monitor::task : Monitor::blended; }
  [[nodiscard]] std::vector<ModelKind> teacher_kinds() const {
    std::vector<ModelKind> out;
    for (const auto& t : teachers) out.push_back(parse_model_kind(t));
    return out;
  }
  [[nodiscard]] bool wants(const std::string& model_name) const {
    return std::find(models.begin(), models.end(), model_name) != models.end();
  }

  void validate() const {
    if (name.empty() || name.find('/') != std::string::npos || name == "." || name == "..")
      throw ConfigError("config field 'name' must be a plain directory name");
    if (corpus.has_value() == generator.has_value())
      throw ConfigError("config needs exactly one of 'corpus' and 'generator'");
    if (generator) generator->g.validate();
    (void)task_kind();
    if (dimension != "arousal" && dimension != "valence")
      throw ConfigError("config field 'dimension' must be arousal or valence");
    if (!profile.empty() && !reference_modalities().count(profile))
      throw ConfigError("config field 'profile' must be recola or sewa");
    if (window_lengths.empty()) throw ConfigError("config field 'window_lengths' must not be empty");
    if (alphas.empty()) throw ConfigError("config field 'alphas' must not be empty");
    if (teachers.empty()) throw ConfigError("config field 'teachers' must not be empty");
    if (models.empty()) throw ConfigError("config field 'models' must not be empty");
    for (double l : window_lengths)
      if (!(l > 0.0)) throw ConfigError("config field 'window_lengths' must be positive");
    if (!(step > 0.0) || step > *std::min_element(window_lengths.begin(), window_lengths.end()))
      throw ConfigError("config field 'step' must be in (0, min window length]");
    for (double a : alphas)
      if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("config field 'alphas' must lie in [0,1]");
    for (const auto& t : teachers)
      if (t != "privnet" && t != "fusionnet") throw ConfigError("config field 'teachers' accepts privnet and fusionnet");
    for (const auto& m : models)
      if (m != "pixelnet" && m != "privnet" && m != "fusionnet" && m != "student")
        throw ConfigError("config field 'models' accepts pixelnet, privnet, fusionnet and student");
    if (!(epsilon >= 0.0)) throw ConfigError("config field 'epsilon' must be >= 0");
    if (train.monitor != "blended" && train.monitor != "task")
      throw ConfigError("config field 'train.monitor' must be blended or task");
    train.t.validate();
    if (model.conv_filters.size() != 4) throw ConfigError("config field 'model.conv_filters' needs four entries");
    if (model.penultimate_dim < 1) throw ConfigError("config field 'model.penultimate_dim' must be >= 1");
    if (!(model.dropout_rate >= 0.0 && model.dropout_rate < 1.0))
      throw ConfigError("config field 'model.dropout_rate' must be in [0,1)");
    if (folds.k < 2 || folds.sweep_repeats < 1 || folds.compare_repeats < 1)
      throw ConfigError("config field 'folds' needs k >= 2 and repeats >= 1");
    if (jobs < 1) throw ConfigError("config field 'jobs' must be >= 1");
  }

  /// Hash of everything that affects a trained run's numbers.
  [[nodiscard]] std::uint64_t training_hash() const {
    nlohmann::json j = {{"task", task},       {"dimension", dimension},
                        {"step", step},       {"epsilon", epsilon},
                        {"split_t", schema::encode(split_t)},
                        {"train", schema::dump(train)}, {"model", schema::dump(model)}};
    return Fnv1a().update(j.dump()).digest();
  }

  [[nodiscard]] std::uint64_t hash() const {
    auto j = schema::dump(*this);
    j.erase("jobs");
    return Fnv1a().update(j.dump()).digest();
  }
};

inline nlohmann::json read_json_file(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config file " + file.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(file.string() + ": invalid JSON: " + e.what());
  }
}

inline ExperimentConfig load_experiment_config(const fs::path& file) {
  auto cfg = schema::parse<ExperimentConfig>(read_json_file(file));
  cfg.validate();
  return cfg;
}

inline GeneratorConfig load_generator_config(const fs::path& file) {
  auto s = schema::parse<GeneratorSettings>(read_json_file(file));
  s.g.validate();
  return s.g;
}

inline nlohmann::json config_schema() {
  return {{"experiment", schema::describe<ExperimentConfig>()}, {"generator", schema::describe<GeneratorSettings>()}};
}

// ---------------------------------------------------------------------------
// Small file helpers

namespace detail {

inline void write_text(const fs::path& file, const std::string& text) {
  fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  out << text;
  if (!out) throw Error("cannot write " + file.string());
}

inline std::string read_text(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

inline std::string fmt_opt(const std::optional<double>& v) { return v ? fmt("%.6f", *v) : "NA"; }

inline std::string window_tag(double length) { return "w" + fmt("%g", length); }

inline std::string cell_tag(int repeat, int fold) {
  return "r" + std::to_string(repeat) + "f" + std::to_string(fold);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Corpus loading

struct LoadedCorpus {
  std::vector<Session> sessions;
  std::uint64_t hash = 0;
  LabelRange label_range;
};

inline LoadedCorpus load_corpus(const ExperimentConfig& cfg) {
  LoadedCorpus c;
  if (cfg.generator) {
    c.sessions = generate_corpus(cfg.generator->g);
    c.hash = corpus_hash(c.sessions);
  } else {
    const fs::path root(*cfg.corpus);
    if (!cfg.profile.empty()) {
      const auto report = validate_corpus(root, cfg.profile, cfg.dimension);
      if (!report.ok()) {
        std::string msg = "corpus " + root.string() + " failed validation:";
        for (const auto& s : report.sessions)
          for (const auto& p : s.problems) msg += "\n  " + s.directory + ": " + p;
        throw CorpusFormatError(msg);
      }
    }
    c.sessions = read_corpus(root, cfg.dimension);
    c.hash = corpus_hash(root);
  }
  if (c.sessions.empty()) throw EmptyDatasetError("corpus has no sessions");
  c.label_range = c.sessions.front().label_range;
  return c;
}

inline WindowTable<float> window_table(const LoadedCorpus& corpus, double length, double step,
                                       std::vector<std::string>* rejected = nullptr) {
  std::vector<Window> windows;
  for (const auto& s : corpus.sessions) {
    auto w = slice_windows(s, length, step, rejected);
    windows.insert(windows.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
  }
  return WindowTable<float>::build(windows, corpus.label_range);
}

// ---------------------------------------------------------------------------
// Metrics tables

struct MetricsRow {
  double window = 0.0;
  CellMetrics m;
};

inline const char* kMetricsHeader = "window,model,repeat,fold,n_train,n_test,accuracy,pcc,ccc,best_epoch,stopped_epoch";

inline std::string metrics_csv(std::vector<MetricsRow> rows) {
  std::sort(rows.begin(), rows.end(), [](const MetricsRow& a, const MetricsRow& b) {
    return std::tie(a.window, a.m.model, a.m.repeat, a.m.fold) < std::tie(b.window, b.m.model, b.m.repeat, b.m.fold);
  });
  std::ostringstream os;
  os << kMetricsHeader << "\n";
  for (const auto& r : rows) {
    const auto& m = r.m;
    os << detail::fmt("%g", r.window) << "," << m.model << "," << m.repeat << "," << m.fold << "," << m.n_train << ","
       << m.n_test << "," << detail::fmt_opt(m.accuracy) << "," << detail::fmt_opt(m.pcc) << ","
       << detail::fmt_opt(m.ccc) << "," << m.best_epoch << "," << m.stopped_epoch << "\n";
  }
  return os.str();
}

inline std::vector<MetricsRow> read_metrics_csv(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw MissingStageError("cannot read " + file.string());
  std::string line;
  std::getline(in, line);
  if (line != kMetricsHeader) throw CorpusFormatError(file.string() + ": unexpected header");
  std::vector<MetricsRow> rows;
  std::size_t lineno = 1;
  const auto opt = [](std::string_view s) -> std::optional<double> {
    if (s == "NA") return std::nullopt;
    return std::stod(std::string(s));
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = io::split_csv(line);
    if (f.size() != 11) throw CorpusFormatError(file.string() + ":" + std::to_string(lineno) + ": expected 11 columns");
    MetricsRow r;
    r.window = std::stod(std::string(f[0]));
    r.m.model = std::string(f[1]);
    r.m.repeat = std::stoi(std::string(f[2]));
    r.m.fold = std::stoi(std::string(f[3]));
    r.m.n_train = std::stoul(std::string(f[4]));
    r.m.n_test = std::stoul(std::string(f[5]));
    r.m.accuracy = opt(f[6]);
    r.m.pcc = opt(f[7]);
    r.m.ccc = opt(f[8]);
    r.m.best_epoch = std::stoi(std::string(f[9]));
    r.m.stopped_epoch = std::stoi(std::string(f[10]));
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::map<double, MetricsReport> by_window(const std::vector<MetricsRow>& rows) {
  std::map<double, MetricsReport> out;
  for (const auto& r : rows) out[r.window].rows.push_back(r.m);
  for (auto& [w, rep] : out) sort_rows(rep.rows);
  return out;
}

inline const char* primary_metric(Task task) { return task == Task::classification ? "accuracy" : "ccc"; }

/// Values of two models paired on (repeat, fold); cells where either is
/// missing are dropped.
inline std::pair<std::vector<double>, std::vector<double>> paired_values(const MetricsReport& rep, const std::string& a,
                                                                         const std::string& b,
                                                                         const std::string& metric) {
  std::map<std::pair<int, int>, double> va;
  const auto pick = [&](const CellMetrics& r) {
    return metric == "accuracy" ? r.accuracy : (metric == "pcc" ? r.pcc : r.ccc);
  };
  for (const auto& r : rep.rows)
    if (r.model == a)
      if (auto v = pick(r)) va[{r.repeat, r.fold}] = *v;
  std::pair<std::vector<double>, std::vector<double>> out;
  for (const auto& r : rep.rows) {
    if (r.model != b) continue;
    const auto v = pick(r);
    const auto it = va.find({r.repeat, r.fold});
    if (!v || it == va.end()) continue;
    out.first.push_back(it->second);
    out.second.push_back(*v);
  }
  return out;
}

inline nlohmann::json to_json(const SignificanceReport& s) {
  return {{"n", s.n},
          {"mean_a", s.mean_a},
          {"mean_b", s.mean_b},
          {"normality_p", schema::encode(s.normality_p)},
          {"test", s.test_used},
          {"statistic", s.statistic},
          {"p_value", s.p_value},
          {"significant", s.significant},
          {"direction", s.direction},
          {"warning", s.warning}};
}

// ---------------------------------------------------------------------------
// Run directories and resume

struct StageContext {
  const ExperimentConfig* cfg = nullptr;
  fs::path stage_dir;
  std::uint64_t corpus_hash = 0;
  std::uint64_t split_hash = 0;
  double window = 0.0;
  bool resume = false;
  std::map<std::string, ModelRequest> requests;
  std::vector<std::string>* run_paths = nullptr;
  std::mutex* mutex = nullptr;
  std::size_t* trained = nullptr;

  [[nodiscard]] fs::path run_dir(const RunKey& key) const {
    return stage_dir / detail::window_tag(window) / detail::cell_tag(key.repeat, key.fold) / key.model;
  }

  [[nodiscard]] std::uint64_t run_hash(const RunKey& key) const {
    return Fnv1a()
        .update_value(cfg->training_hash())
        .update_value(corpus_hash)
        .update_value(split_hash)
        .update(detail::fmt("%.17g", window))
        .update_value(key.repeat)
        .update_value(key.fold)
        .update(key.model)
        .update(kToolVersion)
        .digest();
  }
};

inline nlohmann::json metrics_to_json(const CellMetrics& m) {
  return {{"model", m.model},
          {"repeat", m.repeat},
          {"fold", m.fold},
          {"n_train", m.n_train},
          {"n_test", m.n_test},
          {"accuracy", schema::encode(m.accuracy)},
          {"pcc", schema::encode(m.pcc)},
          {"ccc", schema::encode(m.ccc)},
          {"best_epoch", m.best_epoch},
          {"stopped_epoch", m.stopped_epoch}};
}

inline CellMetrics metrics_from_json(const nlohmann::json& j) {
  CellMetrics m;
  m.model = j.at("model").get<std::string>();
  m.repeat = j.at("repeat").get<int>();
  m.fold = j.at("fold").get<int>();
  m.n_train = j.at("n_train").get<std::size_t>();
  m.n_test = j.at("n_test").get<std::size_t>();
  m.accuracy = schema::decode<std::optional<double>>(j.at("accuracy"));
  m.pcc = schema::decode<std::optional<double>>(j.at("pcc"));
  m.ccc = schema::decode<std::optional<double>>(j.at("ccc"));
  m.best_epoch = j.at("best_epoch").get<int>();
  m.stopped_epoch = j.at("stopped_epoch").get<int>();
  return m;
}

inline std::optional<nlohmann::json> matching_result(const StageContext& ctx, const RunKey& key) {
  const auto file = ctx.run_dir(key) / "result.json";
  if (!fs::exists(file)) return std::nullopt;
  try {
    auto j = nlohmann::json::parse(detail::read_text(file));
    if (j.at("run_hash").get<std::string>() != hex_digest(ctx.run_hash(key))) return std::nullopt;
    return j;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

inline std::string history_csv(const TrainHistory& h) {
  std::ostringstream os;
  os << "epoch,train_loss,val_loss,train_task,train_distance,val_task,val_distance\n";
  for (std::size_t e = 0; e < h.epochs.size(); ++e) {
    const auto& r = h.epochs[e];
    os << e << "," << detail::fmt("%.9g", r.train_loss) << "," << detail::fmt("%.9g", r.val_loss) << ","
       << detail::fmt("%.9g", r.train_task) << "," << detail::fmt("%.9g", r.train_distance) << ","
       << detail::fmt("%.9g", r.val_task) << "," << detail::fmt("%.9g", r.val_distance) << "\n";
  }
  return os.str();
}

inline CvHooks make_hooks(const StageContext& ctx) {
  CvHooks hooks;
  hooks.jobs = ctx.cfg->jobs;
  if (ctx.resume) {
    hooks.cached = [&ctx](const RunKey& key) -> std::optional<CellMetrics> {
      auto j = matching_result(ctx, key);
      if (!j) return std::nullopt;
      std::lock_guard lock(*ctx.mutex);
      ctx.run_paths->push_back(fs::relative(ctx.run_dir(key), ctx.stage_dir.parent_path()).string());
      return metrics_from_json(j->at("metrics"));
    };
    hooks.restore = [&ctx](const RunKey& key, Model<float>& model) {
      const auto ckpt = ctx.run_dir(key) / "model.ckpt";
      if (!matching_result(ctx, key) || !fs::exists(ckpt)) return false;
      load_checkpoint(model, ckpt);
      return true;
    };
  }
  hooks.on_run = [&ctx](const RunKey& key, const RunArtifacts& art) {
    const auto dir = ctx.run_dir(key);
    fs::create_directories(dir);
    const auto hash = ctx.run_hash(key);
    nlohmann::json run = {{"model", key.model},
                          {"window", ctx.window},
                          {"repeat", key.repeat},
                          {"fold", key.fold},
                          {"spec", to_json(art.model->spec())},
                          {"train", schema::dump(ctx.cfg->train)},
                          {"task", ctx.cfg->task},
                          {"epsilon", ctx.cfg->epsilon}};
    if (auto it = ctx.requests.find(key.model); it != ctx.requests.end()) {
      run["alpha"] = it->second.alpha;
      run["teacher"] = it->second.teacher ? nlohmann::json(std::string(to_string(*it->second.teacher))) : nlohmann::json(nullptr);
    }
    detail::write_text(dir / "config.json", run.dump(2) + "\n");
    detail::write_text(dir / "history.csv", history_csv(*art.history));
    save_checkpoint(*art.model, dir / "model.ckpt", hash);
    nlohmann::json result = {{"run_hash", hex_digest(hash)},
                             {"corpus_hash", hex_digest(ctx.corpus_hash)},
                             {"split_hash", hex_digest(ctx.split_hash)},
                             {"config_hash", hex_digest(ctx.cfg->training_hash())},
                             {"teacher_hash", art.teacher_hash ? nlohmann::json(hex_digest(art.teacher_hash)) : nlohmann::json(nullptr)},
                             {"tool_version", kToolVersion},
                             {"metrics", metrics_to_json(*art.metrics)}};
    detail::write_text(dir / "result.json", result.dump(2) + "\n");
    std::lock_guard lock(*ctx.mutex);
    ctx.run_paths->push_back(fs::relative(dir, ctx.stage_dir.parent_path()).string());
    ++*ctx.trained;
  };
  return hooks;
}

// ---------------------------------------------------------------------------
// Stage driver shared by sweep and compare

struct StageOutcome {
  std::vector<MetricsRow> rows;
  std::vector<std::string> failures;
  std::vector<std::string> run_paths;
  std::size_t trained = 0;
  std::uint64_t split_hash = 0;
};

using ModelPlan = std::function<std::vector<ModelRequest>(double window)>;

inline StageOutcome run_stage(const ExperimentConfig& cfg, const LoadedCorpus& corpus, const fs::path& stage_dir,
                              int repeats, const ModelPlan& plan_models, bool resume, std::ostream& log) {
  StageOutcome out;
  std::mutex mutex;
  for (double window : cfg.window_lengths) {
    std::vector<std::string> rejected;
    const auto table = window_table(corpus, window, cfg.step, &rejected);
    if (!rejected.empty()) log << detail::window_tag(window) << ": " << rejected.size() << " windows rejected\n";
    const auto plan = make_folds(table.participants, cfg.folds.k, repeats, cfg.folds.seed);
    out.split_hash = plan.hash();

    CvExperiment exp;
    exp.task = cfg.task_kind();
    exp.epsilon = cfg.epsilon;
    exp.split_t = cfg.split_t;
    exp.train = cfg.train.t;
    exp.base.task = exp.task;
    exp.base.pixel_shape = table.pixel_shape;
    exp.base.privileged_dim = table.privileged_dim();
    exp.base.penultimate_dim = cfg.model.penultimate_dim;
    exp.base.dropout_rate = cfg.model.dropout_rate;
    std::copy(cfg.model.conv_filters.begin(), cfg.model.conv_filters.end(), exp.base.conv_filters.begin());
    exp.models = plan_models(window);
    exp.include_majority = exp.task == Task::classification;
    exp.student_monitor = cfg.monitor();

    StageContext ctx;
    ctx.cfg = &cfg;
    ctx.stage_dir = stage_dir;
    ctx.corpus_hash = corpus.hash;
    ctx.split_hash = plan.hash();
    ctx.window = window;
    ctx.resume = resume;
    for (const auto& r : exp.models) ctx.requests[r.name] = r;
    ctx.run_paths = &out.run_paths;
    ctx.mutex = &mutex;
    ctx.trained = &out.trained;

    log << detail::window_tag(window) << ": " << table.size() << " windows, " << table.participants.size()
        << " participants, " << exp.models.size() << " models x " << repeats * cfg.folds.k << " cells\n";
    const auto report = run_cv(exp, table, plan, make_hooks(ctx));
    for (const auto& r : report.rows) out.rows.push_back({window, r});
    for (const auto& f : report.failures) out.failures.push_back(detail::window_tag(window) + " " + f);
  }
  std::sort(out.run_paths.begin(), out.run_paths.end());
  out.run_paths.erase(std::unique(out.run_paths.begin(), out.run_paths.end()), out.run_paths.end());
  return out;
}

inline void update_manifest(const ExperimentConfig& cfg, const fs::path& root, const LoadedCorpus& corpus,
                            const std::string& stage, const StageOutcome& outcome) {
  const auto file = root / "manifest.json";
  nlohmann::json m = fs::exists(file) ? nlohmann::json::parse(detail::read_text(file)) : nlohmann::json::object();
  m["tool_version"] = kToolVersion;
  m["config_hash"] = hex_digest(cfg.hash());
  m["training_hash"] = hex_digest(cfg.training_hash());
  m["corpus_hash"] = hex_digest(corpus.hash);
  m["stages"][stage] = {{"split_hash", hex_digest(outcome.split_hash)},
                        {"metrics", stage + "/metrics.csv"},
                        {"runs", outcome.run_paths},
                        {"failures", outcome.failures}};
  detail::write_text(file, m.dump(2) + "\n");
}

inline void write_failures(const fs::path& stage_dir, const std::vector<std::string>& failures, std::ostream& log) {
  const auto file = stage_dir / "failures.txt";
  if (failures.empty()) {
    fs::remove(file);
    return;
  }
  std::string text;
  for (const auto& f : failures) text += f + "\n";
  detail::write_text(file, text);
  log << failures.size() << " cell(s) failed:\n" << text;
}

// ---------------------------------------------------------------------------
// Commands

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitPartial = 3;

/// Writes a synthetic corpus plus manifest.json.
inline std::uint64_t cmd_generate(const GeneratorConfig& g, const fs::path& out, bool overwrite) {
  g.validate();
  const auto sessions = generate_corpus(g);
  write_corpus(sessions, out, overwrite);
  const auto hash = corpus_hash(out);
  GeneratorSettings s{g};
  nlohmann::json manifest = {
      {"tool_version", kToolVersion}, {"generator", schema::dump(s)}, {"corpus_hash", hex_digest(hash)}};
  detail::write_text(out / "manifest.json", manifest.dump(2) + "\n");
  return hash;
}

inline nlohmann::json to_json(const IngestReport& r) {
  nlohmann::json sessions = nlohmann::json::array();
  for (const auto& s : r.sessions)
    sessions.push_back({{"directory", s.directory},
                        {"participant_id", s.participant_id},
                        {"ok", s.ok},
                        {"duration", s.duration},
                        {"frames", s.frames},
                        {"modalities", s.modality_dims},
                        {"annotators", s.annotators},
                        {"problems", s.problems}});
  return {{"ok", r.ok()}, {"sessions", sessions}};
}

inline IngestReport cmd_ingest(const fs::path& dir, const std::string& profile, const std::string& dimension) {
  return validate_corpus(dir, profile, dimension);
}

inline fs::path experiment_root(const ExperimentConfig& cfg, const fs::path& runs_root) { return runs_root / cfg.name; }

/// Models of one sweep window: teachers, the shared alpha = 0 student,
/// one student per (teacher, alpha > 0), PixelNet when requested.
inline std::vector<ModelRequest> sweep_models(const ExperimentConfig& cfg) {
  std::vector<ModelRequest> out;
  for (auto t : cfg.teacher_kinds()) out.push_back({std::string(to_string(t)), t, std::nullopt, 0.0});
  if (cfg.wants("pixelnet")) out.push_back({"pixelnet", ModelKind::pixelnet, std::nullopt, 0.0});
  std::vector<double> alphas = cfg.alphas;
  std::sort(alphas.begin(), alphas.end());
  alphas.erase(std::unique(alphas.begin(), alphas.end()), alphas.end());
  if (alphas.front() == 0.0) out.push_back(student_request(std::nullopt, 0.0));
  for (auto t : cfg.teacher_kinds())
    for (double a : alphas)
      if (a > 0.0) out.push_back(student_request(t, a));
  return out;
}

/// Long-format alpha-sweep table: one row per (window, block, model).
inline std::string alpha_sweep_csv(const ExperimentConfig& cfg, const std::vector<MetricsRow>& rows) {
  const auto windows = by_window(rows);
  const std::string metric = primary_metric(cfg.task_kind());
  std::vector<double> alphas = cfg.alphas;
  std::sort(alphas.begin(), alphas.end());
  alphas.erase(std::unique(alphas.begin(), alphas.end()), alphas.end());
  std::ostringstream os;
  os << "window,block,model,alpha,metric,mean,ci95,n\n";
  const auto line = [&](double w, const std::string& block, const std::string& model, const std::string& alpha,
                        const MetricsReport& rep) {
    const auto agg = rep.aggregate(model, metric);
    os << detail::fmt("%g", w) << "," << block << "," << model << "," << alpha << "," << metric << ","
       << (agg ? detail::fmt("%.6f", agg->mean) : "NA") << "," << (agg ? detail::fmt("%.6f", agg->ci95) : "NA") << ","
       << (agg ? agg->n : 0) << "\n";
  };
  for (const auto& [w, rep] : windows) {
    if (cfg.task_kind() == Task::classification) line(w, "baseline", kMajorityName, "", rep);
    if (cfg.wants("pixelnet")) line(w, "baseline", "pixelnet", "", rep);
    for (auto t : cfg.teacher_kinds()) {
      const std::string block(to_string(t));
      line(w, block, block, "", rep);
      for (double a : alphas) line(w, block, student_request(t, a).name, format_alpha(a), rep);
    }
  }
  return os.str();
}

struct SweepResult {
  int exit_code = kExitOk;
  std::size_t trained = 0;
  std::size_t rows = 0;
  std::vector<std::string> failures;
};

inline SweepResult cmd_sweep(const ExperimentConfig& cfg, const fs::path& runs_root, bool resume,
                             std::ostream& log = std::cerr) {
  cfg.validate();
  const auto root = experiment_root(cfg, runs_root);
  const auto stage_dir = root / "sweep";
  if (!resume && fs::exists(stage_dir)) fs::remove_all(stage_dir);
  fs::create_directories(stage_dir);
  detail::write_text(root / "config.json", schema::dump(cfg).dump(2) + "\n");
  const auto corpus = load_corpus(cfg);
  const auto models = sweep_models(cfg);
  const auto outcome =
      run_stage(cfg, corpus, stage_dir, cfg.folds.sweep_repeats, [&](double) { return models; }, resume, log);
  detail::write_text(stage_dir / "metrics.csv", metrics_csv(outcome.rows));
  detail::write_text(stage_dir / "alpha_sweep.csv", alpha_sweep_csv(cfg, outcome.rows));
  write_failures(stage_dir, outcome.failures, log);
  update_manifest(cfg, root, corpus, "sweep", outcome);
  log << "sweep: " << outcome.trained << " runs trained, " << outcome.rows.size() << " metric rows\n";
  return {outcome.failures.empty() ? kExitOk : kExitPartial, outcome.trained, outcome.rows.size(), outcome.failures};
}

/// Best non-zero alpha per (window, teacher) from sweep aggregates; ties
/// go to the smaller alpha.
inline std::map<std::pair<double, std::string>, double> select_best_alphas(const ExperimentConfig& cfg,
                                                                           const std::vector<MetricsRow>& sweep_rows) {
  const auto windows = by_window(sweep_rows);
  const std::string metric = primary_metric(cfg.task_kind());
  std::vector<double> alphas = cfg.alphas;
  std::sort(alphas.begin(), alphas.end());
  std::map<std::pair<double, std::string>, double> best;
  for (double w : cfg.window_lengths) {
    const auto it = windows.find(w);
    if (it == windows.end()) throw MissingStageError("sweep has no results for window " + detail::fmt("%g", w) + " s");
    for (auto t : cfg.teacher_kinds()) {
      std::optional<std::pair<double, double>> top;  // (alpha, mean)
      for (double a : alphas) {
        if (a <= 0.0) continue;
        const auto agg = it->second.aggregate(student_request(t, a).name, metric);
        if (!agg) continue;
        if (!top || agg->mean > top->second) top = {a, agg->mean};
      }
      if (!top)
        throw MissingStageError("sweep has no non-zero alpha student for teacher " + std::string(to_string(t)) +
                                " at window " + detail::fmt("%g", w) + " s");
      best[{w, std::string(to_string(t))}] = top->first;
    }
  }
  return best;
}

struct CompareResult {
  int exit_code = kExitOk;
  std::size_t trained = 0;
  std::map<std::pair<double, std::string>, double> best_alpha;
  std::vector<std::string> failures;
};

inline std::vector<ModelRequest> compare_models(const ExperimentConfig& cfg,
                                                const std::map<std::pair<double, std::string>, double>& best,
                                                double window) {
  std::vector<ModelRequest> out;
  for (const char* t : {"privnet", "fusionnet"})
    if (cfg.wants(t)) out.push_back({t, parse_model_kind(t), std::nullopt, 0.0});
  if (cfg.wants("pixelnet")) out.push_back({"pixelnet", ModelKind::pixelnet, std::nullopt, 0.0});
  if (cfg.wants("student")) {
    out.push_back(student_request(std::nullopt, 0.0));
    for (auto t : cfg.teacher_kinds()) out.push_back(student_request(t, best.at({window, std::string(to_string(t))})));
  }
  return out;
}

inline CompareResult cmd_compare(const ExperimentConfig& cfg, const fs::path& runs_root, bool resume,
                                 std::ostream& log = std::cerr) {
  cfg.validate();
  const auto root = experiment_root(cfg, runs_root);
  const auto sweep_file = root / "sweep" / "metrics.csv";
  if (!fs::exists(sweep_file))
    throw MissingStageError("no sweep results at " + sweep_file.string() +
                            "; run `lupi_cli sweep` with this config first");
  CompareResult result;
  result.best_alpha = select_best_alphas(cfg, read_metrics_csv(sweep_file));
  const auto stage_dir = root / "compare";
  if (!resume && fs::exists(stage_dir)) fs::remove_all(stage_dir);
  fs::create_directories(stage_dir);

  std::ostringstream best_csv;
  best_csv << "window,teacher,alpha,metric\n";
  for (const auto& [key, a] : result.best_alpha)
    best_csv << detail::fmt("%g", key.first) << "," << key.second << "," << format_alpha(a) << ","
             << primary_metric(cfg.task_kind()) << "\n";
  detail::write_text(stage_dir / "best_alpha.csv", best_csv.str());

  const auto corpus = load_corpus(cfg);
  const auto outcome = run_stage(
      cfg, corpus, stage_dir, cfg.folds.compare_repeats,
      [&](double w) { return compare_models(cfg, result.best_alpha, w); }, resume, log);
  detail::write_text(stage_dir / "metrics.csv", metrics_csv(outcome.rows));

  // Aggregates with 95% CIs.
  const auto windows = by_window(outcome.rows);
  std::vector<std::string> metrics = cfg.task_kind() == Task::classification
                                         ? std::vector<std::string>{"accuracy"}
                                         : std::vector<std::string>{"ccc", "pcc"};
  std::ostringstream summary;
  summary << "window,model,metric,mean,ci95,n\n";
  for (const auto& [w, rep] : windows)
    for (const auto& model : rep.models())
      for (const auto& metric : metrics)
        if (auto agg = rep.aggregate(model, metric))
          summary << detail::fmt("%g", w) << "," << model << "," << metric << "," << detail::fmt("%.6f", agg->mean)
                  << "," << detail::fmt("%.6f", agg->ci95) << "," << agg->n << "\n";
  detail::write_text(stage_dir / "summary.csv", summary.str());

  // Pairwise significance: every tuned student against PixelNet, FusionNet
  // and the alpha = 0 student.
  const std::string metric = primary_metric(cfg.task_kind());
  std::ostringstream sig;
  sig << "window,student,baseline,metric,n,mean_student,mean_baseline,test,statistic,p_value,significant\n";
  for (const auto& [w, rep] : windows) {
    for (auto t : cfg.teacher_kinds()) {
      const auto student = student_request(t, result.best_alpha.at({w, std::string(to_string(t))})).name;
      for (const std::string other : {"pixelnet", "fusionnet", "student-a0.00"}) {
        const auto [a, b] = paired_values(rep, student, other, metric);
        if (a.size() < 5) continue;
        const auto s = paired_test(a, b);
        auto j = to_json(s);
        j["window"] = w;
        j["a"] = student;
        j["b"] = other;
        j["metric"] = metric;
        j["alternative"] = "a > b";
        detail::write_text(stage_dir / ("significance_" + detail::window_tag(w) + "_" + student + "_vs_" + other + ".json"),
                           j.dump(2) + "\n");
        sig << detail::fmt("%g", w) << "," << student << "," << other << "," << metric << "," << s.n << ","
            << detail::fmt("%.6f", s.mean_a) << "," << detail::fmt("%.6f", s.mean_b) << "," << s.test_used << ","
            << detail::fmt("%.6f", s.statistic) << "," << detail::fmt("%.6g", s.p_value) << ","
            << (s.significant ? "yes" : "no") << "\n";
      }
    }
  }
  detail::write_text(stage_dir / "significance.csv", sig.str());
  write_failures(stage_dir, outcome.failures, log);
  update_manifest(cfg, root, corpus, "compare", outcome);
  log << "compare: " << outcome.trained << " runs trained\n";
  result.exit_code = outcome.failures.empty() ? kExitOk : kExitPartial;
  result.trained = outcome.trained;
  result.failures = outcome.failures;
  return result;
}

// ---------------------------------------------------------------------------
// Report

struct Bar {
  std::string label;
  double mean = 0.0;
  double ci95 = 0.0;
};

/// Bar chart with 95% CI whiskers as a standalone SVG document.
inline std::string bar_chart_svg(const std::string& title, const std::string& y_label, const std::vector<Bar>& bars) {
  const double width = 120.0 + 70.0 * static_cast<double>(bars.size());
  const double height = 360.0, top = 40.0, bottom = 260.0, left = 70.0;
  double lo = 0.0, hi = 0.0;
  for (const auto& b : bars) {
    lo = std::min(lo, b.mean - b.ci95);
    hi = std::max(hi, b.mean + b.ci95);
  }
  if (hi - lo <= 0.0) hi = lo + 1.0;
  const auto y = [&](double v) { return bottom - (v - lo) / (hi - lo) * (bottom - top); };
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << detail::fmt("%.0f", width) << "\" height=\""
     << detail::fmt("%.0f", height) << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  os << "<text x=\"" << detail::fmt("%.1f", width / 2) << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << title
     << "</text>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << bottom
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << left << "\" y1=\"" << detail::fmt("%.2f", y(0.0)) << "\" x2=\""
     << detail::fmt("%.1f", width - 20) << "\" y2=\"" << detail::fmt("%.2f", y(0.0)) << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double v = lo + (hi - lo) * i / 4.0;
    os << "<text x=\"" << left - 6 << "\" y=\"" << detail::fmt("%.2f", y(v) + 4) << "\" text-anchor=\"end\">"
       << detail::fmt("%.3f", v) << "</text>\n";
  }
  os << "<text x=\"16\" y=\"" << detail::fmt("%.1f", (top + bottom) / 2) << "\" transform=\"rotate(-90 16 "
     << detail::fmt("%.1f", (top + bottom) / 2) << ")\" text-anchor=\"middle\">" << y_label << "</text>\n";
  for (std::size_t i = 0; i < bars.size(); ++i) {
    const auto& b = bars[i];
    const double x = left + 20.0 + 70.0 * static_cast<double>(i);
    const double y0 = y(0.0), y1 = y(b.mean);
    os << "<rect x=\"" << detail::fmt("%.1f", x) << "\" y=\"" << detail::fmt("%.2f", std::min(y0, y1))
       << "\" width=\"44\" height=\"" << detail::fmt("%.2f", std::abs(y0 - y1)) << "\" fill=\"#7a9cc6\"/>\n";
    const double cx = x + 22.0;
    os << "<line x1=\"" << detail::fmt("%.1f", cx) << "\" y1=\"" << detail::fmt("%.2f", y(b.mean - b.ci95))
       << "\" x2=\"" << detail::fmt("%.1f", cx) << "\" y2=\"" << detail::fmt("%.2f", y(b.mean + b.ci95))
       << "\" stroke=\"black\"/>\n";
    for (double v : {b.mean - b.ci95, b.mean + b.ci95})
      os << "<line x1=\"" << detail::fmt("%.1f", cx - 8) << "\" y1=\"" << detail::fmt("%.2f", y(v)) << "\" x2=\""
         << detail::fmt("%.1f", cx + 8) << "\" y2=\"" << detail::fmt("%.2f", y(v)) << "\" stroke=\"black\"/>\n";
    os << "<text x=\"" << detail::fmt("%.1f", cx) << "\" y=\"" << detail::fmt("%.1f", bottom + 14)
       << "\" text-anchor=\"end\" transform=\"rotate(-40 " << detail::fmt("%.1f", cx) << " "
       << detail::fmt("%.1f", bottom + 14) << ")\">" << b.label << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

struct ReportResult {
  std::vector<fs::path> files;
  std::vector<std::string> gaps;
};

/// Lists (model, repeat, fold) cells missing from a stage's metrics.
inline std::vector<std::string> metric_gaps(const std::string& stage, const std::vector<MetricsRow>& rows) {
  std::vector<std::string> gaps;
  for (const auto& [w, rep] : by_window(rows)) {
    std::set<std::pair<int, int>> cells;
    for (const auto& r : rep.rows) cells.insert({r.repeat, r.fold});
    for (const auto& model : rep.models()) {
      std::set<std::pair<int, int>> have;
      for (const auto& r : rep.rows)
        if (r.model == model) have.insert({r.repeat, r.fold});
      for (const auto& c : cells)
        if (!have.count(c))
          gaps.push_back(stage + ": " + detail::window_tag(w) + " " + model + " missing repeat " +
                         std::to_string(c.first) + " fold " + std::to_string(c.second));
    }
  }
  return gaps;
}

inline ReportResult cmd_report(const fs::path& experiment_dir, std::ostream& log = std::cerr) {
  ReportResult result;
  const auto out_dir = experiment_dir / "report";
  const auto cfg_file = experiment_dir / "config.json";
  if (!fs::exists(cfg_file)) throw MissingStageError("no results under " + experiment_dir.string());
  auto cfg = schema::parse<ExperimentConfig>(read_json_file(cfg_file));
  const std::string metric = primary_metric(cfg.task_kind());
  const auto emit = [&](const std::string& name, const std::string& text) {
    detail::write_text(out_dir / name, text);
    result.files.push_back(out_dir / name);
  };

  const auto sweep_file = experiment_dir / "sweep" / "metrics.csv";
  if (fs::exists(sweep_file)) {
    const auto rows = read_metrics_csv(sweep_file);
    const auto windows = by_window(rows);
    std::vector<double> alphas = cfg.alphas;
    std::sort(alphas.begin(), alphas.end());
    alphas.erase(std::unique(alphas.begin(), alphas.end()), alphas.end());
    // Wide table: one row per (block, model), one mean/CI column pair per window.
    std::vector<std::tuple<std::string, std::string, std::string>> lines;
    if (cfg.task_kind() == Task::classification) lines.emplace_back("baseline", kMajorityName, "");
    if (cfg.wants("pixelnet")) lines.emplace_back("baseline", "pixelnet", "");
    for (auto t : cfg.teacher_kinds()) {
      const std::string block(to_string(t));
      lines.emplace_back(block, block, "");
      for (double a : alphas) lines.emplace_back(block, student_request(t, a).name, format_alpha(a));
    }
    std::ostringstream os;
    os << "block,model,alpha";
    for (const auto& [w, rep] : windows) os << "," << detail::window_tag(w) << "_mean," << detail::window_tag(w) << "_ci95";
    os << "\n";
    for (const auto& [block, model, alpha] : lines) {
      os << block << "," << model << "," << alpha;
      for (const auto& [w, rep] : windows) {
        const auto agg = rep.aggregate(model, metric);
        os << "," << (agg ? detail::fmt("%.6f", agg->mean) : "NA") << ","
           << (agg ? detail::fmt("%.6f", agg->ci95) : "NA");
        if (!agg) result.gaps.push_back("sweep: " + detail::window_tag(w) + " has no " + model + " results");
      }
      os << "\n";
    }
    emit("table_alpha_sweep.csv", os.str());
    for (const auto& [w, rep] : windows) {
      std::vector<Bar> bars;
      for (const auto& [block, model, alpha] : lines)
        if (auto agg = rep.aggregate(model, metric)) bars.push_back({model, agg->mean, agg->ci95});
      emit("fig_sweep_" + detail::window_tag(w) + ".svg",
           bar_chart_svg("alpha sweep, " + detail::fmt("%g", w) + " s windows", metric, bars));
    }
    auto gaps = metric_gaps("sweep", rows);
    result.gaps.insert(result.gaps.end(), gaps.begin(), gaps.end());
  } else {
    result.gaps.push_back("sweep: no results (run `lupi_cli sweep`)");
  }

  const auto compare_file = experiment_dir / "compare" / "metrics.csv";
  if (fs::exists(compare_file)) {
    const auto rows = read_metrics_csv(compare_file);
    const auto windows = by_window(rows);
    std::ostringstream table, sig;
    table << "window,model,metric,mean,ci95,n\n";
    sig << "window,student,baseline,metric,n,test,statistic,p_value,significant\n";
    for (const auto& [w, rep] : windows) {
      std::vector<Bar> bars;
      for (const auto& model : rep.models()) {
        for (const char* m : {"accuracy", "pcc", "ccc"}) {
          const auto agg = rep.aggregate(model, m);
          if (!agg) continue;
          table << detail::fmt("%g", w) << "," << model << "," << m << "," << detail::fmt("%.6f", agg->mean) << ","
                << detail::fmt("%.6f", agg->ci95) << "," << agg->n << "\n";
          if (m == metric) bars.push_back({model, agg->mean, agg->ci95});
        }
      }
      emit("fig_compare_" + detail::window_tag(w) + ".svg",
           bar_chart_svg("model comparison, " + detail::fmt("%g", w) + " s windows", metric, bars));
      for (const auto& student : rep.models()) {
        if (student.rfind("student-", 0) != 0 || student == "student-a0.00") continue;
        for (const std::string other : {"pixelnet", "fusionnet", "student-a0.00"}) {
          const auto [a, b] = paired_values(rep, student, other, metric);
          if (a.size() < 5) continue;
          const auto s = paired_test(a, b);
          sig << detail::fmt("%g", w) << "," << student << "," << other << "," << metric << "," << s.n << ","
              << s.test_used << "," << detail::fmt("%.6f", s.statistic) << "," << detail::fmt("%.6g", s.p_value) << ","
              << (s.significant ? "yes" : "no") << "\n";
        }
      }
    }
    emit("table_comparison.csv", table.str());
    emit("table_significance.csv", sig.str());
    auto gaps = metric_gaps("compare", rows);
    result.gaps.insert(result.gaps.end(), gaps.begin(), gaps.end());
  } else {
    result.gaps.push_back("compare: no results (run `lupi_cli compare`)");
  }
  for (const char* stage : {"sweep", "compare"}) {
    const auto f = experiment_dir / stage / "failures.txt";
    if (!fs::exists(f)) continue;
    std::istringstream in(detail::read_text(f));
    for (std::string line; std::getline(in, line);)
      if (!line.empty()) result.gaps.push_back(std::string(stage) + " failure: " + line);
  }
  std::string gaps;
  for (const auto& g : result.gaps) gaps += g + "\n";
  emit("gaps.txt", gaps);
  for (const auto& g : result.gaps) log << "gap: " << g << "\n";
  return result;
}

}  // namespace lupi
