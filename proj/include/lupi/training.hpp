///
/// \file training.hpp
/// \brief Datasets, Adam, early stopping and the teacher-then-student procedure.
///
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "lupi/common.hpp"
#include "lupi/losses.hpp"
#include "lupi/models.hpp"

namespace lupi {

/// Column-per-sample training data. Privileged features sit behind an access
/// lock: while a PrivilegedAccessGuard is alive, any privileged read throws.
template <typename Scalar>
class WindowDataset {
 public:
  WindowDataset() = default;
  WindowDataset(nn::Shape3 pixel_shape, nn::Mat<Scalar> pixels, nn::Mat<Scalar> privileged, std::vector<double> targets,
                std::vector<int> participants, std::vector<std::string> participant_names)
      : pixel_shape_(pixel_shape),
        pixels_(std::move(pixels)),
        privileged_(std::move(privileged)),
        targets_(std::move(targets)),
        participants_(std::move(participants)),
        names_(std::move(participant_names)) {
    const auto n = static_cast<Eigen::Index>(targets_.size());
    if (pixels_.cols() != n || privileged_.cols() != n || static_cast<Eigen::Index>(participants_.size()) != n)
      throw ShapeError("dataset columns disagree on the number of samples");
  }

  [[nodiscard]] std::size_t size() const { return targets_.size(); }
  [[nodiscard]] bool empty() const { return targets_.empty(); }
  [[nodiscard]] nn::Shape3 pixel_shape() const { return pixel_shape_; }
  [[nodiscard]] int privileged_dim() const { return static_cast<int>(privileged_.rows()); }
  [[nodiscard]] const std::vector<double>& targets() const { return targets_; }
  [[nodiscard]] const std::vector<int>& participants() const { return participants_; }
  [[nodiscard]] const std::vector<std::string>& participant_names() const { return names_; }

  [[nodiscard]] nn::Mat<Scalar> pixel_batch(std::span<const std::size_t> idx) const { return gather(pixels_, idx); }

  [[nodiscard]] nn::Mat<Scalar> privileged_batch(std::span<const std::size_t> idx) const {
    if (privileged_locks_ > 0)
      throw ModalityAccessError("privileged features were read while access is locked (pixel-only inference path)");
    ++privileged_reads_;
    return gather(privileged_, idx);
  }

  [[nodiscard]] std::vector<double> targets_of(std::span<const std::size_t> idx) const {
    std::vector<double> out;
    out.reserve(idx.size());
    for (auto i : idx) out.push_back(targets_[i]);
    return out;
  }

  [[nodiscard]] WindowDataset subset(std::span<const std::size_t> idx) const {
    std::vector<double> t;
    std::vector<int> p;
    for (auto i : idx) {
      t.push_back(targets_[i]);
      p.push_back(participants_[i]);
    }
    return {pixel_shape_, gather(pixels_, idx), gather(privileged_, idx), std::move(t), std::move(p), names_};
  }

  [[nodiscard]] std::size_t privileged_reads() const { return privileged_reads_; }
  void lock_privileged() const { ++privileged_locks_; }
  void unlock_privileged() const { --privileged_locks_; }
  [[nodiscard]] bool privileged_locked() const { return privileged_locks_ > 0; }

 private:
  static nn::Mat<Scalar> gather(const nn::Mat<Scalar>& m, std::span<const std::size_t> idx) {
    nn::Mat<Scalar> out(m.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j) out.col(static_cast<Eigen::Index>(j)) = m.col(static_cast<Eigen::Index>(idx[j]));
    return out;
  }

  nn::Shape3 pixel_shape_{};
  nn::Mat<Scalar> pixels_;
  nn::Mat<Scalar> privileged_;
  std::vector<double> targets_;
  std::vector<int> participants_;
  std::vector<std::string> names_;
  mutable int privileged_locks_ = 0;
  mutable std::size_t privileged_reads_ = 0;
};

template <typename Scalar>
class PrivilegedAccessGuard {
 public:
  explicit PrivilegedAccessGuard(const WindowDataset<Scalar>& ds) : ds_(ds) { ds_.lock_privileged(); }
  ~PrivilegedAccessGuard() { ds_.unlock_privileged(); }
  PrivilegedAccessGuard(const PrivilegedAccessGuard&) = delete;
  PrivilegedAccessGuard& operator=(const PrivilegedAccessGuard&) = delete;

 private:
  const WindowDataset<Scalar>& ds_;
};

/// Reads only the modalities `kind` consumes. Pixel-only models never touch
/// the privileged matrix.
template <typename Scalar>
struct BatchInputs {
  nn::Mat<Scalar> pixels;
  nn::Mat<Scalar> privileged;
  ModelInputs<Scalar> view() const {
    return {pixels.size() ? &pixels : nullptr, privileged.size() ? &privileged : nullptr};
  }
};

template <typename Scalar>
BatchInputs<Scalar> fetch_inputs(ModelKind kind, const WindowDataset<Scalar>& ds, std::span<const std::size_t> idx) {
  BatchInputs<Scalar> in;
  if (uses_pixels(kind)) in.pixels = ds.pixel_batch(idx);
  if (uses_privileged(kind)) in.privileged = ds.privileged_batch(idx);
  return in;
}

/// Eval-mode forward pass over the whole dataset in chunks.
template <typename Scalar>
ForwardOutput<Scalar> predict(Model<Scalar>& model, const WindowDataset<Scalar>& ds, std::size_t chunk = 512) {
  ForwardOutput<Scalar> all;
  const auto n = static_cast<Eigen::Index>(ds.size());
  const int d = model.spec().penultimate_dim;
  all.output.resize(model.spec().output_dim(), n);
  all.penultimate.resize(d, n);
  if (model.spec().task == Task::classification) all.probabilities.resize(2, n);
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    const std::size_t stop = std::min(ds.size(), start + chunk);
    idx.resize(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto in = fetch_inputs(model.spec().kind, ds, idx);
    auto out = model.forward(in.view(), nn::Mode::eval);
    const auto s = static_cast<Eigen::Index>(start);
    const auto m = static_cast<Eigen::Index>(stop - start);
    all.output.middleCols(s, m) = out.output;
    all.penultimate.middleCols(s, m) = out.penultimate;
    if (out.probabilities.size()) all.probabilities.middleCols(s, m) = out.probabilities;
  }
  return all;
}

template <typename Scalar>
ForwardOutput<Scalar> gather_columns(const ForwardOutput<Scalar>& f, std::span<const std::size_t> idx) {
  ForwardOutput<Scalar> out;
  const auto pick = [&](const nn::Mat<Scalar>& m) {
    nn::Mat<Scalar> r(m.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j) r.col(static_cast<Eigen::Index>(j)) = m.col(static_cast<Eigen::Index>(idx[j]));
    return r;
  };
  out.output = pick(f.output);
  out.penultimate = pick(f.penultimate);
  if (f.probabilities.size()) out.probabilities = pick(f.probabilities);
  return out;
}

// ---------------------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

template <typename Scalar>
class Adam {
 public:
  Adam(std::vector<nn::ParamRef<Scalar>> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.size, 0.0);
      v_.emplace_back(p.size, 0.0);
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const double lr = cfg_.learning_rate * std::sqrt(c2) / c1;
    const double eps_hat = cfg_.epsilon * std::sqrt(c2);
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& p = params_[k];
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.size; ++i) {
        const double g = static_cast<double>(p.grad[i]);
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        p.value[i] = static_cast<Scalar>(static_cast<double>(p.value[i]) - lr * m[i] / (std::sqrt(v[i]) + eps_hat));
      }
    }
  }

 private:
  std::vector<nn::ParamRef<Scalar>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------

enum class Monitor { blended, task };

struct TrainConfig {
  double learning_rate = 0.001;
  int batch_size = 256;
  int max_epochs = 200;
  int patience = 10;
  double val_fraction = 0.10;
  std::uint64_t seed = 0;
  /// Which validation loss drives early stopping for students.
  Monitor monitor = Monitor::blended;

  void validate() const {
    if (patience < 1) throw ConfigError("patience must be >= 1");
    if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in (0,1)");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  }
};

struct EpochRecord {
  double train_loss = 0.0;
  double val_loss = 0.0;
  double train_task = 0.0;
  double train_distance = 0.0;
  double val_task = 0.0;
  double val_distance = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  int stopped_epoch = -1;
  [[nodiscard]] double best_val_loss() const { return epochs.at(static_cast<std::size_t>(best_epoch)).val_loss; }
};

/// Tracks the best validation loss; stops once `patience` epochs pass without
/// a strict improvement or max_epochs is reached.
class EarlyStopping {
 public:
  EarlyStopping(int patience, int max_epochs) : patience_(patience), max_epochs_(max_epochs) {}

  /// Returns true when the epoch just recorded is a new best.
  bool record(int epoch, double val_loss) {
    last_epoch_ = epoch;
    if (best_epoch_ < 0 || val_loss < best_loss_) {
      best_loss_ = val_loss;
      best_epoch_ = epoch;
      return true;
    }
    return false;
  }

  [[nodiscard]] bool should_stop() const {
    return last_epoch_ + 1 >= max_epochs_ || last_epoch_ - best_epoch_ >= patience_;
  }
  [[nodiscard]] int best_epoch() const { return best_epoch_; }

 private:
  int patience_;
  int max_epochs_;
  int best_epoch_ = -1;
  int last_epoch_ = -1;
  double best_loss_ = std::numeric_limits<double>::infinity();
};

struct TrainValSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<int> val_participants;
};

/// Participant-grouped split whose validation share of windows is closest to
/// `val_fraction` (ties go to fewer validation participants).
inline TrainValSplit split_train_val(std::span<const int> participants, double val_fraction, std::uint64_t seed) {
  std::map<int, std::size_t> counts;
  for (int p : participants) ++counts[p];
  if (counts.size() < 2) throw ConfigError("cannot group-split a dataset with fewer than two participants");
  std::vector<int> order;
  for (const auto& [p, c] : counts) order.push_back(p);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const double target = val_fraction * static_cast<double>(participants.size());
  std::size_t best_k = 1;
  double best_gap = std::numeric_limits<double>::infinity();
  std::size_t running = 0;
  for (std::size_t k = 1; k < order.size(); ++k) {
    running += counts[order[k - 1]];
    const double gap = std::abs(static_cast<double>(running) - target);
    if (gap < best_gap) {
      best_gap = gap;
      best_k = k;
    }
  }
  TrainValSplit split;
  const std::set<int> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(best_k));
  split.val_participants.assign(val.begin(), val.end());
  for (std::size_t i = 0; i < participants.size(); ++i) (val.count(participants[i]) ? split.val : split.train).push_back(i);
  return split;
}

namespace detail {

template <typename Scalar>
struct LossTotals {
  double total = 0.0, task = 0.0, distance = 0.0;
};

template <typename Scalar>
LossTotals<Scalar> evaluate_loss(Model<Scalar>& model, const WindowDataset<Scalar>& ds, const LupiLossConfig& loss,
                                 const ForwardOutput<Scalar>* teacher) {
  const auto out = predict(model, ds);
  const auto t = ds.targets();
  const auto l = lupi_loss<Scalar>(loss, out, teacher, t);
  return {l.total, l.task, l.distance};
}

inline std::string describe_failure(int epoch, std::size_t batch, double total, double task, double distance) {
  std::ostringstream os;
  os << "non-finite loss at epoch " << epoch << ", batch " << batch << " (total " << total << ", task " << task
     << ", distance " << distance << ")";
  return os.str();
}

}  // namespace detail

/// Core optimization loop shared by plain models and students. `teacher_train`
/// and `teacher_val` hold frozen teacher outputs aligned with `train`/`val`.
template <typename Scalar>
TrainHistory fit(Model<Scalar>& model, const WindowDataset<Scalar>& train, const WindowDataset<Scalar>& val,
                 const LupiLossConfig& loss, const TrainConfig& cfg,
                 const ForwardOutput<Scalar>* teacher_train = nullptr,
                 const ForwardOutput<Scalar>* teacher_val = nullptr) {
  cfg.validate();
  loss.validate();
  if (train.empty()) throw EmptyDatasetError("training set is empty");
  if (val.empty()) throw EmptyDatasetError("validation set is empty");
  if (train.pixel_shape() != model.spec().pixel_shape && uses_pixels(model.spec().kind))
    throw ShapeError("dataset pixel shape " + nn::describe(train.pixel_shape()) + " does not match model " +
                     nn::describe(model.spec().pixel_shape));

  model.reseed_dropout(derive_seed(cfg.seed, "dropout"));
  Adam<Scalar> adam(model.parameters(), AdamConfig{cfg.learning_rate});
  std::mt19937_64 shuffle_rng(derive_seed(cfg.seed, "shuffle"));
  EarlyStopping stopper(cfg.patience, cfg.max_epochs);
  TrainHistory history;
  std::vector<Scalar> best_params = model.flat_parameters();

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const auto batch = static_cast<std::size_t>(cfg.batch_size);

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    EpochRecord rec;
    for (std::size_t start = 0, b = 0; start < order.size(); start += batch, ++b) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(batch, order.size() - start));
      const auto in = fetch_inputs(model.spec().kind, train, idx);
      const auto targets = train.targets_of(idx);
      auto out = model.forward(in.view(), nn::Mode::train);
      std::optional<ForwardOutput<Scalar>> t;
      if (teacher_train) t = gather_columns(*teacher_train, idx);
      auto l = lupi_loss<Scalar>(loss, out, t ? &*t : nullptr, targets);
      if (!std::isfinite(l.total)) throw TrainingError(detail::describe_failure(epoch, b, l.total, l.task, l.distance));
      model.backward(l.grad_output, l.grad_penultimate.size() ? &l.grad_penultimate : nullptr);
      adam.step();
      const auto w = static_cast<double>(idx.size());
      rec.train_loss += l.total * w;
      rec.train_task += l.task * w;
      rec.train_distance += l.distance * w;
    }
    const auto n = static_cast<double>(order.size());
    rec.train_loss /= n;
    rec.train_task /= n;
    rec.train_distance /= n;

    const auto v = detail::evaluate_loss(model, val, loss, teacher_val);
    if (!std::isfinite(v.total)) throw TrainingError(detail::describe_failure(epoch, 0, v.total, v.task, v.distance));
    rec.val_loss = v.total;
    rec.val_task = v.task;
    rec.val_distance = v.distance;
    history.epochs.push_back(rec);

    const double monitored = cfg.monitor == Monitor::blended ? v.total : v.task;
    if (stopper.record(epoch, monitored)) best_params = model.flat_parameters();
    if (stopper.should_stop()) break;
  }
  history.best_epoch = stopper.best_epoch();
  history.stopped_epoch = static_cast<int>(history.epochs.size()) - 1;
  model.set_flat_parameters(best_params);
  return history;
}

/// Trains `model` on its own modalities with the plain task loss. A grouped
/// validation split is carved out of `data` for early stopping.
template <typename Scalar>
TrainHistory train_model(Model<Scalar>& model, const WindowDataset<Scalar>& data, Task task, const TrainConfig& cfg) {
  if (task != model.spec().task) throw ConfigError("train_model: task differs from model spec");
  const auto split = split_train_val(data.participants(), cfg.val_fraction, derive_seed(cfg.seed, "validation"));
  const auto train = data.subset(split.train);
  const auto val = data.subset(split.val);
  return fit(model, train, val, LupiLossConfig::defaults(task, 0.0), cfg);
}

template <typename Scalar>
TrainHistory train_teacher(Model<Scalar>& teacher, const WindowDataset<Scalar>& data, Task task,
                           const TrainConfig& cfg) {
  const auto kind = teacher.spec().kind;
  if (kind != ModelKind::privnet && kind != ModelKind::fusionnet)
    throw ConfigError("teachers are privnet or fusionnet, got " + std::string(to_string(kind)));
  return train_model(teacher, data, task, cfg);
}

struct StudentRun {
  TrainHistory history;
  std::uint64_t teacher_hash_before = 0;
  std::uint64_t teacher_hash_after = 0;
};

/// Trains a pixel-only student against a frozen teacher. The teacher is run in
/// eval mode once per sample up front; the student's optimization then runs
/// with privileged access locked on the dataset.
template <typename Scalar>
StudentRun train_student(Model<Scalar>& student, Model<Scalar>& teacher, const WindowDataset<Scalar>& data, Task task,
                         double alpha, const TrainConfig& cfg, Monitor monitor = Monitor::blended) {
  if (uses_privileged(student.spec().kind)) throw ConfigError("student must be a pixel-only model");
  if (task != student.spec().task || task != teacher.spec().task) throw ConfigError("student/teacher task mismatch");
  auto loss = LupiLossConfig::defaults(task, alpha);
  if (task == Task::regression && student.spec().penultimate_dim != teacher.spec().penultimate_dim)
    throw ConfigError("penultimate dimensions differ: student " + std::to_string(student.spec().penultimate_dim) +
                      ", teacher " + std::to_string(teacher.spec().penultimate_dim));

  StudentRun run;
  run.teacher_hash_before = teacher.parameter_hash();
  const auto split = split_train_val(data.participants(), cfg.val_fraction, derive_seed(cfg.seed, "validation"));
  const auto train = data.subset(split.train);
  const auto val = data.subset(split.val);
  std::optional<ForwardOutput<Scalar>> t_train, t_val;
  if (alpha > 0.0) {
    t_train = predict(teacher, train);
    t_val = predict(teacher, val);
  }
  TrainConfig c = cfg;
  c.monitor = monitor;
  {
    PrivilegedAccessGuard<Scalar> lock_train(train);
    PrivilegedAccessGuard<Scalar> lock_val(val);
    run.history = fit(student, train, val, loss, c, t_train ? &*t_train : nullptr, t_val ? &*t_val : nullptr);
  }
  run.teacher_hash_after = teacher.parameter_hash();
  if (run.teacher_hash_after != run.teacher_hash_before)
    throw TrainingError("teacher parameters changed during student training");
  return run;
}

}  // namespace lupi
