#include <gtest/gtest.h>

#include <random>
#include <set>

#include "lupi/training.hpp"

using namespace lupi;
using Mat = nn::Mat<float>;

namespace {

/// Toy corpus: a latent per sample drives the privileged vector cleanly and
/// the pixels through noise. Labels follow the latent with some flips.
WindowDataset<float> toy(int participants, int per_participant, std::uint64_t seed, double pixel_noise = 1.0,
                         double flip = 0.0, Task task = Task::classification) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const nn::Shape3 shape{6, 5, 2};
  const int total = participants * per_participant;
  Mat pixels(shape.size(), total), priv(3, total);
  std::vector<double> targets;
  std::vector<int> groups;
  std::vector<std::string> names;
  for (int p = 0; p < participants; ++p) names.push_back("P" + std::to_string(p));
  for (int i = 0; i < total; ++i) {
    const double z = n01(rng);
    priv(0, i) = static_cast<float>(z);
    priv(1, i) = static_cast<float>(0.1 * n01(rng));
    priv(2, i) = static_cast<float>(-z);
    for (int r = 0; r < shape.size(); ++r) pixels(r, i) = static_cast<float>(0.5 * z + pixel_noise * n01(rng));
    if (task == Task::classification) {
      int label = z > 0 ? 1 : 0;
      if (u(rng) < flip) label = 1 - label;
      targets.push_back(label);
    } else {
      targets.push_back(std::tanh(z));
    }
    groups.push_back(i / per_participant);
  }
  return {shape, std::move(pixels), std::move(priv), std::move(targets), std::move(groups), std::move(names)};
}

ModelSpec tiny(ModelKind kind, Task task = Task::classification) {
  ModelSpec s;
  s.kind = kind;
  s.task = task;
  s.pixel_shape = {6, 5, 2};
  s.privileged_dim = 3;
  s.penultimate_dim = 8;
  s.conv_filters = {4, 4, 4, 4};
  return s;
}

TrainConfig quick(int epochs = 30) {
  TrainConfig c;
  c.batch_size = 32;
  c.max_epochs = epochs;
  c.seed = 5;
  return c;
}

double accuracy(Model<float>& m, const WindowDataset<float>& ds) {
  const auto out = predict(m, ds);
  int correct = 0;
  for (Eigen::Index j = 0; j < out.probabilities.cols(); ++j)
    correct += (out.probabilities(1, j) > out.probabilities(0, j) ? 1 : 0) == ds.targets()[static_cast<std::size_t>(j)];
  return correct / static_cast<double>(ds.size());
}

}  // namespace

TEST(EarlyStopping, ImprovingRunsToMaxEpochs) {
  EarlyStopping s(10, 25);
  int last = -1;
  for (int e = 0; e < 100; ++e) {
    s.record(e, 100.0 - e);
    last = e;
    if (s.should_stop()) break;
  }
  EXPECT_EQ(last, 24);
  EXPECT_EQ(s.best_epoch(), 24);
}

TEST(EarlyStopping, PatienceArithmetic) {
  EarlyStopping s(10, 200);
  int last = -1;
  for (int e = 0; e < 200; ++e) {
    s.record(e, e <= 3 ? 10.0 - e : 7.0);
    last = e;
    if (s.should_stop()) break;
  }
  EXPECT_EQ(s.best_epoch(), 3);
  EXPECT_EQ(last, 13);
}

TEST(Split, TenParticipantsGiveOneValidationGroup) {
  std::vector<int> groups;
  for (int p = 0; p < 10; ++p)
    for (int k = 0; k < 20; ++k) groups.push_back(p);
  const auto a = split_train_val(groups, 0.10, 7);
  EXPECT_EQ(a.val_participants.size(), 1u);
  EXPECT_EQ(a.val.size(), 20u);
  std::set<int> train_groups, val_groups;
  for (auto i : a.train) train_groups.insert(groups[i]);
  for (auto i : a.val) val_groups.insert(groups[i]);
  for (int g : val_groups) EXPECT_EQ(train_groups.count(g), 0u);
  const auto b = split_train_val(groups, 0.10, 7);
  EXPECT_EQ(a.val, b.val);
  EXPECT_EQ(a.train, b.train);
}

TEST(Split, NeverSharesParticipants) {
  std::mt19937_64 rng(1);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    std::vector<int> groups;
    const int n = 2 + static_cast<int>(rng() % 15);
    for (int p = 0; p < n; ++p)
      for (int k = 0; k < 1 + static_cast<int>(rng() % 30); ++k) groups.push_back(p);
    const auto s = split_train_val(groups, 0.1 + 0.3 * static_cast<double>(seed % 3), seed);
    std::set<int> tr, va;
    for (auto i : s.train) tr.insert(groups[i]);
    for (auto i : s.val) va.insert(groups[i]);
    ASSERT_FALSE(va.empty());
    ASSERT_FALSE(tr.empty());
    for (int g : va) ASSERT_EQ(tr.count(g), 0u);
    ASSERT_EQ(s.train.size() + s.val.size(), groups.size());
  }
}

TEST(Split, SingleParticipantRejected) {
  const std::vector<int> groups(30, 4);
  EXPECT_THROW(split_train_val(groups, 0.1, 1), ConfigError);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.patience = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.val_fraction = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.batch_size, 256);
  EXPECT_DOUBLE_EQ(c.learning_rate, 0.001);
  EXPECT_EQ(c.patience, 10);
}

TEST(Training, SeparableSetReachesHighAccuracy) {
  const auto data = toy(10, 40, 1);
  auto model = build_privnet<float>(tiny(ModelKind::privnet), 3);
  auto cfg = quick(50);
  cfg.learning_rate = 0.01;
  const auto history = train_model(model, data, Task::classification, cfg);
  EXPECT_LE(history.stopped_epoch, 49);
  EXPECT_GE(accuracy(model, data), 0.95);
}

TEST(Training, HistoryBoundsAndBestWeightsRestored) {
  const auto data = toy(8, 30, 2, 2.0, 0.2);
  auto model = build_pixelnet<float>(tiny(ModelKind::pixelnet), 4);
  auto cfg = quick(40);
  cfg.patience = 3;
  const auto h = train_model(model, data, Task::classification, cfg);
  EXPECT_EQ(static_cast<int>(h.epochs.size()), h.stopped_epoch + 1);
  EXPECT_LE(h.stopped_epoch - h.best_epoch, cfg.patience);
  double best = std::numeric_limits<double>::infinity();
  for (const auto& e : h.epochs) best = std::min(best, e.val_loss);
  EXPECT_EQ(h.epochs[static_cast<std::size_t>(h.best_epoch)].val_loss, best);

  const auto split = split_train_val(data.participants(), cfg.val_fraction, derive_seed(cfg.seed, "validation"));
  const auto val = data.subset(split.val);
  const auto l = detail::evaluate_loss<float>(model, val, LupiLossConfig::defaults(Task::classification, 0.0), nullptr);
  EXPECT_NEAR(l.total, best, 1e-9);
}

TEST(Training, DeterministicGivenSeed) {
  const auto data = toy(6, 30, 3, 1.5, 0.1);
  auto run = [&] {
    auto m = build_pixelnet<float>(tiny(ModelKind::pixelnet), 9);
    const auto h = train_model(m, data, Task::classification, quick(8));
    return std::pair{m.parameter_hash(), h.epochs.back().val_loss};
  };
  EXPECT_EQ(run(), run());
}

TEST(Training, NonFiniteLossAbortsWithDiagnostics) {
  auto data = toy(4, 10, 4, 1.0, 0.0, Task::regression);
  std::vector<double> t = data.targets();
  t[3] = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> all(data.size());
  std::iota(all.begin(), all.end(), 0);
  WindowDataset<float> bad(data.pixel_shape(), data.pixel_batch(all), data.privileged_batch(all), t,
                           data.participants(), data.participant_names());
  auto m = build_privnet<float>(tiny(ModelKind::privnet, Task::regression), 1);
  try {
    train_model(m, bad, Task::regression, quick(3));
    FAIL() << "expected a training error";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
  }
}

TEST(Teachers, ModalityViews) {
  const auto data = toy(4, 5, 5);
  const std::vector<std::size_t> idx{0, 1, 2};
  EXPECT_EQ(fetch_inputs(ModelKind::privnet, data, idx).pixels.size(), 0);
  EXPECT_GT(fetch_inputs(ModelKind::fusionnet, data, idx).pixels.size(), 0);
  EXPECT_GT(fetch_inputs(ModelKind::fusionnet, data, idx).privileged.size(), 0);
  EXPECT_EQ(fetch_inputs(ModelKind::studentnet, data, idx).privileged.size(), 0);
  auto pixel = build_pixelnet<float>(tiny(ModelKind::pixelnet), 1);
  EXPECT_THROW(train_teacher(pixel, data, Task::classification, quick(1)), ConfigError);
}

TEST(Guard, LockedPrivilegedReadThrows) {
  const auto data = toy(3, 4, 6);
  const std::vector<std::size_t> idx{0};
  {
    PrivilegedAccessGuard<float> guard(data);
    EXPECT_THROW((void)data.privileged_batch(idx), ModalityAccessError);
    auto student = build_pixelnet<float>(tiny(ModelKind::studentnet), 1);
    EXPECT_NO_THROW(predict(student, data));
    auto fusion = build_fusionnet<float>(tiny(ModelKind::fusionnet), 1);
    EXPECT_THROW(predict(fusion, data), ModalityAccessError);
  }
  EXPECT_NO_THROW((void)data.privileged_batch(idx));
}

TEST(Students, AlphaZeroMatchesPixelNet) {
  const auto data = toy(6, 30, 7, 1.5, 0.1);
  const auto cfg = quick(6);
  auto pixel = build_pixelnet<float>(tiny(ModelKind::pixelnet), 21);
  train_model(pixel, data, Task::classification, cfg);
  auto student = build_pixelnet<float>(tiny(ModelKind::studentnet), 21);
  auto teacher = build_privnet<float>(tiny(ModelKind::privnet), 22);
  train_student(student, teacher, data, Task::classification, 0.0, cfg);
  EXPECT_EQ(pixel.parameter_hash(), student.parameter_hash());
}

TEST(Students, TeacherFrozenAndReusable) {
  const auto data = toy(6, 30, 8, 1.5, 0.1);
  auto teacher = build_fusionnet<float>(tiny(ModelKind::fusionnet), 3);
  train_teacher(teacher, data, Task::classification, quick(5));
  const auto hash = teacher.parameter_hash();
  for (double alpha : {0.25, 0.75, 1.0}) {
    auto student = build_pixelnet<float>(tiny(ModelKind::studentnet), 4);
    const auto run = train_student(student, teacher, data, Task::classification, alpha, quick(3));
    EXPECT_EQ(run.teacher_hash_before, hash);
    EXPECT_EQ(run.teacher_hash_after, hash);
  }
  EXPECT_EQ(teacher.parameter_hash(), hash);
}

TEST(Students, RegressionPenultimateMismatchRejected) {
  const auto data = toy(4, 10, 9, 1.0, 0.0, Task::regression);
  auto s_spec = tiny(ModelKind::studentnet, Task::regression);
  auto t_spec = tiny(ModelKind::privnet, Task::regression);
  t_spec.penultimate_dim = 5;
  auto student = build_pixelnet<float>(s_spec, 1);
  auto teacher = build_privnet<float>(t_spec, 1);
  EXPECT_THROW(train_student(student, teacher, data, Task::regression, 0.5, quick(1)), ConfigError);
}

TEST(Students, FullDistillationAgreesMoreWithTeacher) {
  double agree_zero = 0.0, agree_one = 0.0;
  const int seeds = 4;
  for (int seed = 0; seed < seeds; ++seed) {
    const auto train = toy(8, 40, 100 + seed, 1.2, 0.25);
    const auto test = toy(4, 40, 200 + seed, 1.2, 0.25);
    auto cfg = quick(30);
    cfg.seed = static_cast<std::uint64_t>(seed);
    auto teacher = build_privnet<float>(tiny(ModelKind::privnet), 10 + seed);
    train_teacher(teacher, train, Task::classification, cfg);
    const auto t_out = predict(teacher, test);
    for (double alpha : {0.0, 1.0}) {
      auto student = build_pixelnet<float>(tiny(ModelKind::studentnet), 50 + seed);
      train_student(student, teacher, train, Task::classification, alpha, cfg);
      PrivilegedAccessGuard<float> guard(test);
      const auto s_out = predict(student, test);
      int same = 0;
      for (Eigen::Index j = 0; j < s_out.probabilities.cols(); ++j)
        same += (s_out.probabilities(1, j) > s_out.probabilities(0, j)) ==
                (t_out.probabilities(1, j) > t_out.probabilities(0, j));
      (alpha == 0.0 ? agree_zero : agree_one) += same / static_cast<double>(test.size());
    }
  }
  EXPECT_GT(agree_one / seeds, agree_zero / seeds);
}
