///
/// \file evaluation.hpp
/// \brief Participant-grouped repeated k-fold cross-validation, per-fold
///        metrics, and the paired model comparison.
///
#pragma once

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <tuple>
#include <vector>

#include "lupi/common.hpp"
#include "lupi/stats.hpp"
#include "lupi/training.hpp"
#include "lupi/windowing.hpp"

namespace lupi {

// ---------------------------------------------------------------------------
// Folds

struct FoldPlan {
  int k = 5;
  int repeats = 5;
  std::uint64_t seed = 0;
  std::vector<std::string> participants;            // sorted
  std::vector<std::vector<int>> assignments;        // [repeat][participant] -> fold

  [[nodiscard]] std::vector<std::string> test_participants(int repeat, int fold) const {
    std::vector<std::string> out;
    const auto& a = assignments.at(static_cast<std::size_t>(repeat));
    for (std::size_t i = 0; i < participants.size(); ++i)
      if (a[i] == fold) out.push_back(participants[i]);
    return out;
  }

  [[nodiscard]] std::uint64_t hash() const {
    Fnv1a h;
    h.update_value(k).update_value(repeats);
    for (const auto& p : participants) h.update(p).update("\n");
    for (const auto& a : assignments) h.update_span(std::span<const int>(a));
    return h.digest();
  }
};

/// Each repeat shuffles the participants with its own derived seed and deals
/// them round-robin, so fold sizes differ by at most one.
inline FoldPlan make_folds(std::vector<std::string> participants, int k, int repeats, std::uint64_t seed) {
  std::sort(participants.begin(), participants.end());
  participants.erase(std::unique(participants.begin(), participants.end()), participants.end());
  if (k < 2) throw ConfigError("k must be >= 2");
  if (repeats < 1) throw ConfigError("repeats must be >= 1");
  if (static_cast<int>(participants.size()) < k)
    throw ConfigError("cannot make " + std::to_string(k) + " folds from " + std::to_string(participants.size()) +
                      " participants");
  FoldPlan plan{k, repeats, seed, participants, {}};
  for (int r = 0; r < repeats; ++r) {
    std::vector<std::size_t> order(participants.size());
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(r)));
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<int> fold_of(participants.size());
    for (std::size_t pos = 0; pos < order.size(); ++pos) fold_of[order[pos]] = static_cast<int>(pos % static_cast<std::size_t>(k));
    plan.assignments.push_back(std::move(fold_of));
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Metrics

inline double accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size() || predictions.empty())
    throw ShapeError("accuracy needs equal, non-empty prediction and label lists");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += predictions[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// Modal training class; a tie predicts `low`.
inline AffectClass majority_baseline(std::span<const int> train_labels) {
  if (train_labels.empty()) throw EmptyDatasetError("majority baseline needs training labels");
  const auto high = std::count(train_labels.begin(), train_labels.end(), 1);
  const auto low = static_cast<std::ptrdiff_t>(train_labels.size()) - high;
  return high > low ? AffectClass::high : AffectClass::low;
}

struct SignificanceReport {
  std::size_t n = 0;
  double mean_a = 0.0;
  double mean_b = 0.0;
  std::optional<double> normality_p;  // absent when n < 20
  std::string test_used;              // "t-test" or "wilcoxon"
  double statistic = 0.0;
  double p_value = 1.0;
  bool significant = false;
  std::string direction;  // "a", "b" or "tie"
  std::string warning;
};

inline constexpr double kSignificanceLevel = 0.05;
inline constexpr std::size_t kNormalityMinN = 20;

/// One-tailed paired comparison (alternative: a > b). A t-test is used when
/// the D'Agostino-Pearson gate does not reject normality of a - b at 0.05,
/// otherwise the Wilcoxon signed-rank test.
inline SignificanceReport paired_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ConfigError("paired_test: a and b are not paired (different lengths)");
  if (a.size() < 5) throw ConfigError("paired_test needs at least 5 pairs");
  SignificanceReport r;
  r.n = a.size();
  r.mean_a = mean(a);
  r.mean_b = mean(b);
  std::vector<double> diffs(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) diffs[i] = a[i] - b[i];
  bool normal = false;
  if (r.n >= kNormalityMinN) {
    const auto gate = dagostino_pearson(diffs);
    r.normality_p = gate.p_value;
    normal = gate.p_value >= kSignificanceLevel;
  } else {
    r.warning = "fewer than 20 pairs: normality gate skipped, using Wilcoxon";
  }
  if (normal) {
    r.test_used = "t-test";
    r.p_value = paired_t_pvalue(diffs, &r.statistic);
  } else {
    r.test_used = "wilcoxon";
    const auto w = wilcoxon_signed_rank(diffs);
    r.statistic = w.w_plus;
    r.p_value = w.p_value;
  }
  r.significant = r.p_value < kSignificanceLevel;
  r.direction = r.mean_a > r.mean_b ? "a" : (r.mean_a < r.mean_b ? "b" : "tie");
  return r;
}

// ---------------------------------------------------------------------------
// Fold data

/// All windows of a corpus flattened once into column matrices; folds select
/// columns from it.
template <typename Scalar>
struct WindowTable {
  nn::Shape3 pixel_shape{};
  nn::Mat<Scalar> pixels;
  std::vector<std::vector<double>> privileged;
  std::vector<double> labels;
  std::vector<std::string> participant_of;
  std::vector<std::string> participants;  // sorted unique
  LabelRange label_range;

  static WindowTable build(std::span<const Window> windows, LabelRange range) {
    if (windows.empty()) throw EmptyDatasetError("no windows to build a dataset from");
    WindowTable t;
    const auto& w0 = windows.front();
    t.pixel_shape = {w0.height, w0.width, w0.channels};
    t.label_range = range;
    t.pixels.resize(t.pixel_shape.size(), static_cast<Eigen::Index>(windows.size()));
    for (std::size_t i = 0; i < windows.size(); ++i) {
      const auto& w = windows[i];
      if (nn::Shape3{w.height, w.width, w.channels} != t.pixel_shape) throw ShapeError("windows differ in pixel shape");
      for (std::size_t p = 0; p < w.pixels.size(); ++p)
        t.pixels(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i)) = static_cast<Scalar>(w.pixels[p]);
      t.privileged.push_back(w.privileged());
      t.labels.push_back(w.continuous_label);
      t.participant_of.push_back(w.participant_id);
    }
    t.participants = t.participant_of;
    std::sort(t.participants.begin(), t.participants.end());
    t.participants.erase(std::unique(t.participants.begin(), t.participants.end()), t.participants.end());
    return t;
  }

  [[nodiscard]] std::size_t size() const { return labels.size(); }
  [[nodiscard]] int privileged_dim() const { return privileged.empty() ? 0 : static_cast<int>(privileged.front().size()); }
};

template <typename Scalar>
struct FoldData {
  WindowDataset<Scalar> train;
  WindowDataset<Scalar> test;
  std::vector<double> test_continuous;  // unbinarized test labels
  std::optional<double> split_t;
};

/// Splits by held-out participants, fits the feature normalizer on the
/// training side only and, for classification, thresholds both sides with
/// t (default: training median) and the uncertainty band.
template <typename Scalar>
FoldData<Scalar> prepare_fold(const WindowTable<Scalar>& table, const std::vector<std::string>& test_participants,
                              Task task, double epsilon, std::optional<double> split_t = std::nullopt) {
  const std::set<std::string> held_out(test_participants.begin(), test_participants.end());
  std::vector<std::size_t> train_idx, test_idx;
  for (std::size_t i = 0; i < table.size(); ++i) (held_out.count(table.participant_of[i]) ? test_idx : train_idx).push_back(i);
  if (train_idx.empty() || test_idx.empty()) throw EmptyDatasetError("fold has an empty train or test side");

  std::vector<std::vector<double>> train_rows;
  for (auto i : train_idx) train_rows.push_back(table.privileged[i]);
  const auto normalizer = FeatureNormalizer::fit(train_rows);

  FoldData<Scalar> fold;
  std::vector<double> targets(table.size());
  std::vector<bool> keep(table.size(), true);
  if (task == Task::classification) {
    std::vector<double> train_labels;
    for (auto i : train_idx) train_labels.push_back(table.labels[i]);
    const double t = split_t.value_or(median(train_labels));
    fold.split_t = t;
    LabelingConfig cfg{Task::classification, t, epsilon};
    const auto classes = binarize(table.labels, cfg);
    for (std::size_t i = 0; i < table.size(); ++i) {
      keep[i] = classes[i].has_value();
      targets[i] = keep[i] ? static_cast<double>(static_cast<int>(*classes[i])) : 0.0;
    }
  } else {
    targets = table.labels;
  }

  std::map<std::string, int> pid;
  for (std::size_t i = 0; i < table.participants.size(); ++i) pid[table.participants[i]] = static_cast<int>(i);

  const auto make = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> kept;
    for (auto i : idx)
      if (keep[i]) kept.push_back(i);
    if (kept.empty()) throw EmptyDatasetError("every window of a fold side fell inside the uncertainty band");
    nn::Mat<Scalar> pix(table.pixels.rows(), static_cast<Eigen::Index>(kept.size()));
    nn::Mat<Scalar> prv(table.privileged_dim(), static_cast<Eigen::Index>(kept.size()));
    std::vector<double> t;
    std::vector<int> parts;
    for (std::size_t j = 0; j < kept.size(); ++j) {
      const auto i = kept[j];
      pix.col(static_cast<Eigen::Index>(j)) = table.pixels.col(static_cast<Eigen::Index>(i));
      const auto z = normalizer.apply(table.privileged[i]);
      for (std::size_t d = 0; d < z.size(); ++d) prv(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(j)) = static_cast<Scalar>(z[d]);
      t.push_back(targets[i]);
      parts.push_back(pid[table.participant_of[i]]);
    }
    return std::pair{WindowDataset<Scalar>(table.pixel_shape, std::move(pix), std::move(prv), std::move(t),
                                           std::move(parts), table.participants),
                     kept};
  };
  auto [train, train_kept] = make(train_idx);
  auto [test, test_kept] = make(test_idx);
  fold.train = std::move(train);
  fold.test = std::move(test);
  for (auto i : test_kept) fold.test_continuous.push_back(table.labels[i]);
  return fold;
}

// ---------------------------------------------------------------------------
// Cross-validation runs

/// One model to train and test in every fold. Students name their teacher.
struct ModelRequest {
  std::string name;
  ModelKind kind = ModelKind::pixelnet;
  std::optional<ModelKind> teacher;
  double alpha = 0.0;
};

inline std::string format_alpha(double alpha) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%.2f", alpha);
  return buf;
}

inline ModelRequest student_request(std::optional<ModelKind> teacher, double alpha) {
  if (alpha == 0.0) return {"student-a" + format_alpha(0.0), ModelKind::studentnet, std::nullopt, 0.0};
  if (!teacher) throw ConfigError("alpha > 0 requires a teacher");
  return {"student-" + std::string(to_string(*teacher)) + "-a" + format_alpha(alpha), ModelKind::studentnet, teacher,
          alpha};
}

inline constexpr const char* kMajorityName = "majority";

struct CvExperiment {
  Task task = Task::classification;
  double epsilon = 0.1;
  std::optional<double> split_t;
  TrainConfig train;
  ModelSpec base;  // pixel shape, privileged dim, filters, dropout
  std::vector<ModelRequest> models;
  bool include_majority = true;
  Monitor student_monitor = Monitor::blended;
};

struct CellMetrics {
  std::string model;
  int repeat = 0;
  int fold = 0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
  std::optional<double> accuracy;
  std::optional<double> pcc;
  std::optional<double> ccc;
  int best_epoch = -1;
  int stopped_epoch = -1;
};

struct RunKey {
  int repeat = 0;
  int fold = 0;
  std::string model;
};

/// What a finished training run hands to persistence hooks.
struct RunArtifacts {
  const CellMetrics* metrics = nullptr;
  const TrainHistory* history = nullptr;
  Model<float>* model = nullptr;
  std::uint64_t teacher_hash = 0;
};

struct CvHooks {
  /// Returns stored metrics for a run that need not be retrained.
  std::function<std::optional<CellMetrics>(const RunKey&)> cached;
  /// Restores a trained model (used for teachers of resumed students).
  std::function<bool(const RunKey&, Model<float>&)> restore;
  std::function<void(const RunKey&, const RunArtifacts&)> on_run;
  int jobs = 1;
};

struct MetricsReport {
  std::vector<CellMetrics> rows;  // sorted by (model, repeat, fold)
  std::vector<std::string> failures;  // one message per failed cell

  [[nodiscard]] std::vector<std::string> models() const {
    std::vector<std::string> out;
    for (const auto& r : rows)
      if (std::find(out.begin(), out.end(), r.model) == out.end()) out.push_back(r.model);
    return out;
  }

  /// Metric values of one model ordered by (repeat, fold); missing values
  /// (undefined correlations) are skipped.
  [[nodiscard]] std::vector<double> values(const std::string& model, const std::string& metric) const {
    std::vector<double> out;
    for (const auto& r : rows) {
      if (r.model != model) continue;
      const auto& v = metric == "accuracy" ? r.accuracy : (metric == "pcc" ? r.pcc : r.ccc);
      if (v) out.push_back(*v);
    }
    return out;
  }

  struct Aggregate {
    double mean = 0.0;
    double ci95 = 0.0;
    std::size_t n = 0;
  };

  [[nodiscard]] std::optional<Aggregate> aggregate(const std::string& model, const std::string& metric) const {
    const auto v = values(model, metric);
    if (v.empty()) return std::nullopt;
    return Aggregate{lupi::mean(v), ci95_half_width(v), v.size()};
  }
};

inline void sort_rows(std::vector<CellMetrics>& rows) {
  std::sort(rows.begin(), rows.end(), [](const CellMetrics& a, const CellMetrics& b) {
    return std::tie(a.model, a.repeat, a.fold) < std::tie(b.model, b.repeat, b.fold);
  });
}

/// Training seed shared by every pixel-stream model of a cell, so PixelNet and
/// the alpha = 0 student are the same run.
inline std::uint64_t cell_seed(std::uint64_t experiment_seed, int repeat, int fold) {
  return derive_seed(derive_seed(experiment_seed, static_cast<std::uint64_t>(repeat)), static_cast<std::uint64_t>(fold));
}

namespace detail {

inline std::uint64_t init_seed_for(std::uint64_t cell, ModelKind kind) {
  return derive_seed(cell, kind == ModelKind::privnet ? "init-privnet"
                           : kind == ModelKind::fusionnet ? "init-fusionnet"
                                                          : "init-pixel");
}

inline CellMetrics score(const CvExperiment& exp, const FoldData<float>& fold, const ForwardOutput<float>& pred,
                         const LabelRange& range) {
  CellMetrics m;
  m.n_train = fold.train.size();
  m.n_test = fold.test.size();
  const auto n = static_cast<std::size_t>(pred.output.cols());
  if (exp.task == Task::classification) {
    std::vector<int> yhat(n), y(n);
    for (std::size_t j = 0; j < n; ++j) {
      const auto c = static_cast<Eigen::Index>(j);
      yhat[j] = pred.probabilities(1, c) > pred.probabilities(0, c) ? 1 : 0;
      y[j] = static_cast<int>(fold.test.targets()[j]);
    }
    m.accuracy = accuracy(yhat, y);
  } else {
    std::vector<double> yhat(n);
    for (std::size_t j = 0; j < n; ++j) yhat[j] = range.clip(static_cast<double>(pred.output(0, static_cast<Eigen::Index>(j))));
    m.pcc = pcc(yhat, fold.test_continuous);
    m.ccc = ccc(yhat, fold.test_continuous);
  }
  return m;
}

inline ModelSpec spec_for(const CvExperiment& exp, ModelKind kind) {
  ModelSpec s = exp.base;
  s.kind = kind;
  s.task = exp.task;
  return s;
}

/// Runs every requested model for one (repeat, fold) cell.
inline std::vector<CellMetrics> run_cell(const CvExperiment& exp, const WindowTable<float>& table,
                                         const FoldPlan& plan, int repeat, int fold_index, const CvHooks& hooks) {
  auto fold = prepare_fold(table, plan.test_participants(repeat, fold_index), exp.task, exp.epsilon, exp.split_t);
  const std::uint64_t seed = cell_seed(exp.train.seed, repeat, fold_index);
  TrainConfig tc = exp.train;
  tc.seed = derive_seed(seed, "train");

  std::vector<CellMetrics> rows;
  std::map<ModelKind, std::unique_ptr<Model<float>>> teachers;
  std::map<ModelKind, TrainHistory> teacher_history;
  std::vector<std::unique_ptr<Model<float>>> pixel_models;
  Model<float>* plain_pixel = nullptr;
  TrainHistory plain_history;

  const auto teacher_for = [&](ModelKind kind) -> Model<float>& {
    auto& slot = teachers[kind];
    if (slot) return *slot;
    slot = std::make_unique<Model<float>>(build_model<float>(spec_for(exp, kind), init_seed_for(seed, kind)));
    const RunKey key{repeat, fold_index, std::string(to_string(kind))};
    if (!(hooks.restore && hooks.restore(key, *slot))) teacher_history[kind] = train_teacher(*slot, fold.train, exp.task, tc);
    return *slot;
  };

  for (const auto& req : exp.models) {
    const RunKey key{repeat, fold_index, req.name};
    if (hooks.cached) {
      if (auto hit = hooks.cached(key)) {
        rows.push_back(*hit);
        continue;
      }
    }
    CellMetrics m;
    TrainHistory history;
    std::uint64_t teacher_hash = 0;
    Model<float>* trained = nullptr;
    std::unique_ptr<Model<float>> own;
    if (req.kind == ModelKind::privnet || req.kind == ModelKind::fusionnet) {
      trained = &teacher_for(req.kind);
      if (auto it = teacher_history.find(req.kind); it != teacher_history.end()) history = it->second;
    } else if (req.alpha == 0.0 && plain_pixel) {
      // PixelNet and the alpha = 0 student are one computation; reuse it.
      own = std::make_unique<Model<float>>(build_pixelnet<float>(spec_for(exp, req.kind), init_seed_for(seed, req.kind)));
      if (own->parameter_count() != plain_pixel->parameter_count())
        throw ShapeError("pixel-only models differ in parameter count");
      own->set_flat_parameters(plain_pixel->flat_parameters());
      history = plain_history;
      trained = own.get();
    } else {
      own = std::make_unique<Model<float>>(build_pixelnet<float>(spec_for(exp, req.kind), init_seed_for(seed, req.kind)));
      if (req.kind == ModelKind::studentnet && req.alpha > 0.0) {
        auto& teacher = teacher_for(*req.teacher);
        auto run = train_student(*own, teacher, fold.train, exp.task, req.alpha, tc, exp.student_monitor);
        history = run.history;
        teacher_hash = run.teacher_hash_after;
      } else {
        // PixelNet and the alpha = 0 student: plain pixel training.
        history = train_model(*own, fold.train, exp.task, tc);
      }
      trained = own.get();
      if (req.alpha == 0.0) {
        plain_pixel = trained;
        plain_history = history;
      }
    }
    ForwardOutput<float> pred;
    if (uses_privileged(trained->spec().kind)) {
      pred = predict(*trained, fold.test);
    } else {
      PrivilegedAccessGuard<float> guard(fold.test);
      pred = predict(*trained, fold.test);
    }
    m = score(exp, fold, pred, table.label_range);
    m.model = req.name;
    m.repeat = repeat;
    m.fold = fold_index;
    m.best_epoch = history.best_epoch;
    m.stopped_epoch = history.stopped_epoch;
    if (hooks.on_run) hooks.on_run(key, RunArtifacts{&m, &history, trained, teacher_hash});
    rows.push_back(m);
    if (own) pixel_models.push_back(std::move(own));
  }

  if (exp.include_majority && exp.task == Task::classification) {
    std::vector<int> train_labels, test_labels;
    for (double t : fold.train.targets()) train_labels.push_back(static_cast<int>(t));
    for (double t : fold.test.targets()) test_labels.push_back(static_cast<int>(t));
    const int c = static_cast<int>(majority_baseline(train_labels));
    CellMetrics m;
    m.model = kMajorityName;
    m.repeat = repeat;
    m.fold = fold_index;
    m.n_train = train_labels.size();
    m.n_test = test_labels.size();
    m.accuracy = accuracy(std::vector<int>(test_labels.size(), c), test_labels);
    rows.push_back(m);
  }
  return rows;
}

}  // namespace detail

/// Trains and tests every requested model on every (repeat, fold) cell of a
/// fixed plan. All models of a cell see the same train/validation/test split.
/// Cells are independent and may run on `hooks.jobs` threads; results do not
/// depend on the degree of parallelism. A failing cell is reported in
/// `failures` and does not stop the others.
inline MetricsReport run_cv(const CvExperiment& exp, const WindowTable<float>& table, const FoldPlan& plan,
                            const CvHooks& hooks = {}) {
  if (plan.participants != table.participants)
    throw ConfigError("fold plan participants do not match the dataset");
  std::vector<std::pair<int, int>> cells;
  for (int r = 0; r < plan.repeats; ++r)
    for (int f = 0; f < plan.k; ++f) cells.emplace_back(r, f);

  std::vector<std::vector<CellMetrics>> results(cells.size());
  std::vector<std::string> errors(cells.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < cells.size();) {
      try {
        results[i] = detail::run_cell(exp, table, plan, cells[i].first, cells[i].second, hooks);
      } catch (const std::exception& e) {
        errors[i] = "repeat " + std::to_string(cells[i].first) + " fold " + std::to_string(cells[i].second) + ": " +
                    e.what();
      }
    }
  };
  const int jobs = std::max(1, hooks.jobs);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  MetricsReport report;
  for (const auto& e : errors)
    if (!e.empty()) report.failures.push_back(e);
  for (auto& r : results) report.rows.insert(report.rows.end(), r.begin(), r.end());
  sort_rows(report.rows);
  return report;
}

}  // namespace lupi
