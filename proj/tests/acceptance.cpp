/// Acceptance suite: one PASS/FAIL line per numbered criterion.
///
/// Usage: acceptance [criterion ...]   (no arguments runs all ten)
/// Exit status is 0 only when every selected criterion passes.

#include <boost/multiprecision/cpp_bin_float.hpp>
#include <boost/multiprecision/cpp_int.hpp>
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "lupi/evaluation.hpp"
#include "lupi/experiment.hpp"
#include "lupi/losses.hpp"
#include "lupi/stats.hpp"
#include "lupi/synthetic.hpp"
#include "lupi/windowing.hpp"

using namespace lupi;
using Rational = boost::multiprecision::cpp_rational;
using Big = boost::multiprecision::cpp_bin_float_50;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

int worker_count() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

// ---------------------------------------------------------------------------
// Criteria 1-3: trend reproduction on the default synthetic corpus

constexpr double kWindowSeconds = 1.0;
constexpr double kStepSeconds = 0.4;
const std::vector<double> kStudentAlphas{0.25, 0.5, 0.75};

WindowTable<float> default_table(std::uint64_t seed) {
  GeneratorConfig g;
  g.seed = seed;
  std::vector<Window> windows;
  for (const auto& s : generate_corpus(g))
    for (auto& w : slice_windows(s, kWindowSeconds, kStepSeconds)) windows.push_back(std::move(w));
  return WindowTable<float>::build(windows, g.label_range);
}

CvExperiment default_experiment(const WindowTable<float>& table, Task task, std::uint64_t seed, bool with_fusion) {
  CvExperiment exp;
  exp.task = task;
  exp.train.seed = seed;
  exp.base.pixel_shape = table.pixel_shape;
  exp.base.privileged_dim = table.privileged_dim();
  exp.include_majority = false;
  exp.models = {{"pixelnet", ModelKind::pixelnet, std::nullopt, 0.0},
                {"privnet", ModelKind::privnet, std::nullopt, 0.0},
                student_request(std::nullopt, 0.0)};
  if (with_fusion) exp.models.push_back({"fusionnet", ModelKind::fusionnet, std::nullopt, 0.0});
  for (double a : kStudentAlphas) exp.models.push_back(student_request(ModelKind::privnet, a));
  return exp;
}

/// Student alpha with the highest mean of `metric`; ties go to the smaller alpha.
std::pair<std::string, double> best_student(const MetricsReport& report, const std::string& metric) {
  std::string best;
  double best_mean = -std::numeric_limits<double>::infinity();
  for (double a : kStudentAlphas) {
    const auto name = student_request(ModelKind::privnet, a).name;
    const auto agg = report.aggregate(name, metric);
    if (agg && agg->mean > best_mean) {
      best = name;
      best_mean = agg->mean;
    }
  }
  return {best, best_mean};
}

struct ClassificationRun {
  MetricsReport report;
  double seconds = 0.0;
};

const ClassificationRun& classification_run() {
  static const ClassificationRun run = [] {
    const auto t0 = Clock::now();
    const auto table = default_table(GeneratorConfig{}.seed);
    const auto plan = make_folds(table.participants, 5, 5, 2024);
    const auto exp = default_experiment(table, Task::classification, 2024, true);
    CvHooks hooks;
    hooks.jobs = worker_count();
    ClassificationRun r;
    r.report = run_cv(exp, table, plan, hooks);
    r.seconds = seconds_since(t0);
    return r;
  }();
  return run;
}

std::string failures_note(const MetricsReport& report) {
  return report.failures.empty() ? "" : fmt("; %zu failed cells", report.failures.size());
}

Outcome criterion_lupi_gain() {
  const auto& run = classification_run();
  const auto& rep = run.report;
  const auto [best, best_mean] = best_student(rep, "accuracy");
  const auto base = rep.values("student-a0.00", "accuracy");
  const auto ours = rep.values(best, "accuracy");
  if (best.empty() || base.size() != 25 || ours.size() != 25)
    return {false, "incomplete 5x5 results" + failures_note(rep)};
  const auto sig = paired_test(ours, base);
  const double gain = sig.mean_a - sig.mean_b;
  return {gain >= 0.02 && sig.p_value < 0.05,
          fmt("%s %.4f vs alpha=0 %.4f (gain %+.2f points), %s p=%.4g, %.0f s", best.c_str(), sig.mean_a, sig.mean_b,
              100.0 * gain, sig.test_used.c_str(), sig.p_value, run.seconds)};
}

Outcome criterion_fusion_gap() {
  const auto& rep = classification_run().report;
  const auto [best, best_mean] = best_student(rep, "accuracy");
  const auto fusion = rep.aggregate("fusionnet", "accuracy");
  const auto pixel = rep.aggregate("pixelnet", "accuracy");
  if (best.empty() || !fusion || !pixel) return {false, "missing results" + failures_note(rep)};
  const double student_gap = fusion->mean - best_mean;
  const double pixel_gap = fusion->mean - pixel->mean;
  return {student_gap <= 0.03 && pixel_gap > 0.03,
          fmt("fusionnet %.4f, %s %.4f (gap %.2f points), pixelnet %.4f (gap %.2f points)", fusion->mean, best.c_str(),
              best_mean, 100.0 * student_gap, pixel->mean, 100.0 * pixel_gap)};
}

Outcome criterion_regression_gain() {
  const auto t0 = Clock::now();
  int held = 0;
  std::ostringstream per_seed;
  for (std::uint64_t master = 1; master <= 5; ++master) {
    const auto table = default_table(master);
    const auto plan = make_folds(table.participants, 5, 1, master);
    const auto exp = default_experiment(table, Task::regression, master, false);
    CvHooks hooks;
    hooks.jobs = worker_count();
    const auto rep = run_cv(exp, table, plan, hooks);
    const auto [best, best_mean] = best_student(rep, "ccc");
    const auto base = rep.aggregate("student-a0.00", "ccc");
    const double gain = base && !best.empty() ? best_mean - base->mean : -1.0;
    held += gain >= 0.03;
    per_seed << (master > 1 ? ", " : "") << fmt("seed %d %+.3f", static_cast<int>(master), gain);
  }
  return {held >= 4, fmt("CCC gain >= 0.03 in %d/5 seeds (", held) + per_seed.str() + fmt("), %.0f s", seconds_since(t0))};
}

// ---------------------------------------------------------------------------
// Criterion 4: loss endpoints

Outcome criterion_endpoints() {
  std::mt19937_64 rng(404);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  int mismatches = 0;
  for (int i = 0; i < 1000; ++i) {
    const double ps = unit(rng), pt = unit(rng);
    const std::vector<double> s{ps, 1.0 - ps}, t{pt, 1.0 - pt};
    const int label = static_cast<int>(rng() % 2);
    mismatches += student_loss_classification(s, t, label, 0.0) != cross_entropy(s, label);
    mismatches += student_loss_classification(s, t, label, 1.0) != kl_divergence(t, s);

    std::vector<double> su(96), tu(96);
    for (auto& v : su) v = gauss(rng);
    for (auto& v : tu) v = gauss(rng);
    const double y = gauss(rng), target = gauss(rng);
    mismatches += student_loss_regression(y, su, tu, target, 0.0) != (y - target) * (y - target);
    mismatches += student_loss_regression(y, su, tu, target, 1.0) != cosine_distance(su, tu);
  }
  return {mismatches == 0, fmt("%d mismatches over 1000 inputs x 4 endpoint checks", mismatches)};
}

// ---------------------------------------------------------------------------
// Criterion 5: finite-difference gradients

using MatD = nn::Mat<double>;

MatD random_matrix(int rows, int cols, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  MatD m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// Largest violation ratio |numeric - analytic| / (1e-4 max(|numeric|, |analytic|) + 1e-7); <= 1 passes.
double gradient_violation(Task task, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelSpec spec;
  spec.kind = ModelKind::studentnet;
  spec.task = task;
  spec.pixel_shape = {6, 5, 2};
  spec.penultimate_dim = 4;
  spec.dropout_rate = 0.0;
  spec.conv_filters = {2, 2, 2, 2};
  auto model = build_model<double>(spec, seed);
  std::vector<double> params(model.parameter_count());
  std::normal_distribution<double> draw(0.0, 0.5);
  for (auto& w : params) w = draw(rng);
  model.set_flat_parameters(params);

  const int n = 3;
  const MatD pixels = random_matrix(spec.pixel_shape.size(), n, rng);
  ForwardOutput<double> teacher;
  teacher.output = random_matrix(spec.output_dim(), n, rng);
  teacher.penultimate = random_matrix(spec.penultimate_dim, n, rng);
  std::vector<double> targets;
  for (int j = 0; j < n; ++j) targets.push_back(task == Task::classification ? static_cast<double>(rng() % 2) : draw(rng));
  const double alpha = std::uniform_real_distribution<double>(0.05, 0.95)(rng);
  const auto cfg = LupiLossConfig::defaults(task, alpha);
  const ModelInputs<double> in{&pixels, nullptr};

  const auto l = lupi_loss<double>(cfg, model.forward(in, nn::Mode::train), &teacher, targets);
  model.backward(l.grad_output, l.grad_penultimate.size() ? &l.grad_penultimate : nullptr);
  const auto loss_at = [&] { return lupi_loss<double>(cfg, model.forward(in, nn::Mode::eval), &teacher, targets).total; };

  double worst = 0.0;
  const double h = 1e-6;
  for (auto& p : model.parameters()) {
    for (std::size_t i = 0; i < p.size; ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + h;
      const double up = loss_at();
      p.value[i] = saved - h;
      const double down = loss_at();
      p.value[i] = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic = p.grad[i];
      const double allowed = 1e-4 * std::max(std::abs(numeric), std::abs(analytic)) + 1e-7;
      worst = std::max(worst, std::abs(numeric - analytic) / allowed);
    }
  }
  return worst;
}

Outcome criterion_gradients() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  int failing = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    for (Task task : {Task::classification, Task::regression}) {
      const double v = gradient_violation(task, 500 + seed);
      worst = std::max(worst, v);
      failing += v > 1.0;
    }
  }
  const double secs = seconds_since(t0);
  return {failing == 0 && secs < 60.0,
          fmt("20 models x 2 losses, %d over tolerance, worst ratio %.3f, %.2f s", failing, worst, secs)};
}

// ---------------------------------------------------------------------------
// Criterion 6: correlation oracles

struct ExactPair {
  Rational cov, var_x, var_y, mean_gap_sq;
};

ExactPair exact_moments(const std::vector<int>& x, const std::vector<int>& y) {
  const Rational n(static_cast<int>(x.size()));
  Rational mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  ExactPair e{0, 0, 0, (mx - my) * (mx - my)};
  for (std::size_t i = 0; i < x.size(); ++i) {
    e.cov += (x[i] - mx) * (y[i] - my);
    e.var_x += (x[i] - mx) * (x[i] - mx);
    e.var_y += (y[i] - my) * (y[i] - my);
  }
  e.cov /= n;
  e.var_x /= n;
  e.var_y /= n;
  return e;
}

Outcome criterion_metric_oracles() {
  std::mt19937_64 rng(606);
  std::uniform_int_distribution<int> value(-25, 25);
  std::uniform_int_distribution<int> length(3, 12);
  int series = 0, bad_pcc = 0, bad_ccc = 0, bound = 0;
  double worst = 0.0;
  while (series < 200) {
    std::vector<int> x(static_cast<std::size_t>(length(rng))), y(x.size());
    for (auto& v : x) v = value(rng);
    for (auto& v : y) v = value(rng);
    const auto e = exact_moments(x, y);
    if (e.var_x == 0 || e.var_y == 0) continue;
    ++series;
    const std::vector<double> xd(x.begin(), x.end()), yd(y.begin(), y.end());
    const double p_exact = static_cast<double>(Big(e.cov) / boost::multiprecision::sqrt(Big(e.var_x * e.var_y)));
    const double c_exact = static_cast<double>(2 * e.cov / (e.var_x + e.var_y + e.mean_gap_sq));
    const double p = *pcc(xd, yd), c = *ccc(xd, yd);
    worst = std::max({worst, std::abs(p - p_exact), std::abs(c - c_exact)});
    bad_pcc += std::abs(p - p_exact) > 1e-9;
    bad_ccc += std::abs(c - c_exact) > 1e-9;
    bound += std::abs(c) > std::abs(p);
  }
  const auto ref = exact_moments({1, 2, 3}, {2, 4, 6});
  const Rational r = 2 * ref.cov / (ref.var_x + ref.var_y + ref.mean_gap_sq);
  const double c123 = *ccc(std::vector<double>{1, 2, 3}, std::vector<double>{2, 4, 6});
  const bool example = r == Rational(4, 11) && std::abs(c123 - 4.0 / 11.0) <= 1e-15;
  return {bad_pcc == 0 && bad_ccc == 0 && bound == 0 && example,
          fmt("200 series: pcc off %d, ccc off %d, |ccc|>|pcc| %d, worst error %.2e; CCC([1,2,3],[2,4,6]) = %.15f",
              bad_pcc, bad_ccc, bound, worst, c123)};
}

// ---------------------------------------------------------------------------
// Criterion 7: statistical calibration

Outcome criterion_calibration() {
  std::mt19937_64 rng(707);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> x(100);
  int rejected = 0;
  for (int t = 0; t < 1000; ++t) {
    for (auto& v : x) v = n(rng);
    rejected += dagostino_pearson(x).p_value < 0.05;
  }
  const double rate = rejected / 1000.0;
  const auto w = wilcoxon_signed_rank(std::vector<double>{1, 2, 3, 4, 5, 6});
  const bool wilcoxon_ok = w.exact && w.p_value == 1.0 / 64.0;
  return {rate >= 0.04 && rate <= 0.06 && wilcoxon_ok,
          fmt("normality false rejections %.1f%% (n=100, 1000 trials); Wilcoxon exact p = %.10g (1/64 = %.10g)",
              100.0 * rate, w.p_value, 1.0 / 64.0)};
}

// ---------------------------------------------------------------------------
// Criterion 8: window arithmetic

Outcome criterion_windowing() {
  std::mt19937_64 rng(808);
  int wrong = 0;
  for (int c = 0; c < 500; ++c) {
    const Millis length = 100 * static_cast<Millis>(1 + rng() % 50);
    const Millis step = 100 * static_cast<Millis>(1 + rng() % static_cast<std::uint64_t>(length / 100));
    const Millis duration = 100 * static_cast<Millis>(rng() % 1200);
    const Millis expected = duration < length ? 0 : (duration - length) / step + 1;
    const auto spans = window_spans(to_seconds(duration), to_seconds(length), to_seconds(step));
    bool ok = static_cast<Millis>(spans.size()) == expected;
    for (const auto& s : spans) ok = ok && s.start + s.length <= duration;
    wrong += !ok;
  }
  GeneratorConfig g;
  g.n_participants = 1;
  g.session_duration = 10.0;
  const auto session = generate_corpus(g).front();
  const auto n_spans = window_spans(10.0, 1.0, 0.4).size();
  const auto n_windows = slice_windows(session, 1.0, 0.4).size();
  return {wrong == 0 && n_spans == 23 && n_windows == 23,
          fmt("%d/500 randomized cases disagree with the floor formula; 10 s / 1 s / 0.4 s gives %zu spans, %zu windows",
              wrong, n_spans, n_windows)};
}

// ---------------------------------------------------------------------------
// Criterion 9: isolation invariants

Outcome criterion_isolation() {
  std::vector<std::string> names;
  for (int i = 0; i < 23; ++i) names.push_back(participant_name(i));
  int overlaps = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const auto plan = make_folds(names, 5, 1, seed);
    for (int f = 0; f < 5; ++f) {
      const auto test = plan.test_participants(0, f);
      const std::set<std::string> test_set(test.begin(), test.end());
      std::vector<int> train_ids;  // window-level participant ids, 3-7 windows each
      for (int i = 0; i < static_cast<int>(names.size()); ++i)
        if (!test_set.count(names[static_cast<std::size_t>(i)]))
          train_ids.insert(train_ids.end(), 3 + (seed + static_cast<std::uint64_t>(i)) % 5, i);
      const auto split = split_train_val(train_ids, 0.1, seed);
      std::set<int> tr, va;
      for (auto i : split.train) tr.insert(train_ids[i]);
      for (auto i : split.val) va.insert(train_ids[i]);
      for (int p : va) overlaps += tr.count(p) + test_set.count(names[static_cast<std::size_t>(p)]);
      for (int p : tr) overlaps += test_set.count(names[static_cast<std::size_t>(p)]);
      overlaps += split.train.size() + split.val.size() != train_ids.size();
    }
  }

  GeneratorConfig g;
  g.n_participants = 6;
  g.session_duration = 10.0;
  std::vector<Window> windows;
  for (const auto& s : generate_corpus(g))
    for (auto& w : slice_windows(s, 1.0, 0.4)) windows.push_back(std::move(w));
  const auto table = WindowTable<float>::build(windows, g.label_range);
  const auto plan = make_folds(table.participants, 3, 1, 9);
  const auto fold = prepare_fold(table, plan.test_participants(0, 0), Task::classification, 0.1);

  ModelSpec spec;
  spec.task = Task::classification;
  spec.pixel_shape = table.pixel_shape;
  spec.privileged_dim = table.privileged_dim();
  spec.penultimate_dim = 16;
  spec.conv_filters = {4, 4, 4, 4};
  spec.kind = ModelKind::privnet;
  auto teacher = build_model<float>(spec, 1);
  spec.kind = ModelKind::studentnet;
  auto student = build_model<float>(spec, 2);
  TrainConfig tc;
  tc.max_epochs = 3;
  tc.batch_size = 32;
  tc.seed = 5;
  train_teacher(teacher, fold.train, Task::classification, tc);
  const auto hash_before = teacher.parameter_hash();
  const auto run = train_student(student, teacher, fold.train, Task::classification, 0.5, tc);
  const bool hash_ok = teacher.parameter_hash() == hash_before && run.teacher_hash_before == run.teacher_hash_after;

  const auto reads_before = fold.test.privileged_reads();
  bool student_ok = true, guard_trips = false;
  {
    PrivilegedAccessGuard<float> guard(fold.test);
    try {
      (void)predict(student, fold.test);
    } catch (const ModalityAccessError&) {
      student_ok = false;
    }
    try {
      (void)predict(teacher, fold.test);
    } catch (const ModalityAccessError&) {
      guard_trips = true;
    }
  }
  student_ok = student_ok && fold.test.privileged_reads() == reads_before;
  return {overlaps == 0 && student_ok && guard_trips && hash_ok,
          fmt("participant overlaps in 1000 plans: %d; guarded student inference %s; guard stops privileged reads: %s; "
              "teacher hash unchanged: %s",
              overlaps, student_ok ? "clean" : "read privileged data", guard_trips ? "yes" : "no",
              hash_ok ? "yes" : "no")};
}

// ---------------------------------------------------------------------------
// Criterion 10: sweep determinism

Outcome criterion_determinism() {
  const nlohmann::json j = {{"name", "determinism"},
                            {"generator", {{"seed", 3}, {"n_participants", 6}, {"session_duration", 10.0}}},
                            {"task", "classification"},
                            {"window_lengths", {1.0}},
                            {"alphas", {0.0, 0.5}},
                            {"teachers", {"privnet", "fusionnet"}},
                            {"train", {{"batch_size", 32}, {"max_epochs", 3}, {"seed", 11}}},
                            {"model", {{"penultimate_dim", 16}, {"conv_filters", {4, 4, 4, 4}}}},
                            {"folds", {{"k", 3}, {"sweep_repeats", 1}, {"compare_repeats", 1}}}};
  auto cfg = schema::parse<ExperimentConfig>(j);
  const auto base = fs::temp_directory_path() / "lupi_acceptance_determinism";
  fs::remove_all(base);
  std::ostringstream log;
  std::string bytes[2];
  for (int r = 0; r < 2; ++r) {
    const auto root = base / ("run" + std::to_string(r));
    cfg.jobs = r == 0 ? 1 : std::max(2, worker_count());
    const auto res = cmd_sweep(cfg, root, false, log);
    if (res.exit_code != kExitOk) return {false, "sweep failed: " + log.str()};
    bytes[r] = detail::read_text(root / cfg.name / "sweep" / "metrics.csv");
  }
  fs::remove_all(base);
  return {!bytes[0].empty() && bytes[0] == bytes[1],
          fmt("metrics.csv %zu vs %zu bytes, %s (serial run vs %d jobs)", bytes[0].size(), bytes[1].size(),
              bytes[0] == bytes[1] ? "identical" : "different", std::max(2, worker_count()))};
}

}  // namespace

int main(int argc, char** argv) {
  const std::map<int, std::function<Outcome()>> criteria{
      {1, criterion_lupi_gain},    {2, criterion_fusion_gap},   {3, criterion_regression_gain},
      {4, criterion_endpoints},    {5, criterion_gradients},    {6, criterion_metric_oracles},
      {7, criterion_calibration},  {8, criterion_windowing},    {9, criterion_isolation},
      {10, criterion_determinism}};
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));
  if (selected.empty())
    for (const auto& [id, fn] : criteria) selected.push_back(id);

  int failed = 0;
  for (int id : selected) {
    const auto it = criteria.find(id);
    if (it == criteria.end()) {
      std::cerr << "unknown criterion " << id << "\n";
      return 2;
    }
    Outcome o;
    try {
      o = it->second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << " | " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
