///
/// \file windowing.hpp
/// \brief Sessions, windows and the label/feature/frame aggregation that turns
///        one into the other.
///
/// All time arithmetic is done in integer milliseconds. Corpus timestamps
/// carry three decimals, so this is exact and window membership never
/// depends on floating-point rounding. A timestamp belongs to the window
/// [start, start + length).
///
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lupi/common.hpp"

namespace lupi {

using Millis = std::int64_t;

inline Millis to_millis(double seconds) { return static_cast<Millis>(std::llround(seconds * 1000.0)); }
inline double to_seconds(Millis ms) { return static_cast<double>(ms) / 1000.0; }

struct LabelRange {
  double lo = -1.0;
  double hi = 1.0;

  [[nodiscard]] bool contains(double v) const { return v >= lo && v <= hi; }
  [[nodiscard]] double clip(double v) const { return std::clamp(v, lo, hi); }
  [[nodiscard]] double midpoint() const { return 0.5 * (lo + hi); }
};

struct AnnotationTrace {
  std::string annotator_id;
  std::vector<double> timestamps;
  std::vector<double> values;
};

/// 8-bit grayscale frames at the native rate, row-major, all the same size.
struct FrameStream {
  int height = 0;
  int width = 0;
  double native_fps = 25.0;
  int skip = 5;
  std::vector<std::vector<std::uint8_t>> frames;

  [[nodiscard]] double effective_fps() const { return native_fps / skip; }
  [[nodiscard]] Millis frame_time(std::size_t index) const {
    return static_cast<Millis>(std::llround(static_cast<double>(index) * 1000.0 / native_fps));
  }
};

/// One modality's feature vectors, stored row-major (`dim` values per tick).
struct FeatureStream {
  std::string modality;
  std::size_t dim = 0;
  std::vector<double> timestamps;
  std::vector<double> values;

  [[nodiscard]] std::size_t size() const { return timestamps.size(); }
  [[nodiscard]] std::span<const double> row(std::size_t i) const {
    return {values.data() + i * dim, dim};
  }
};

/// Privileged modalities are fused in this order: audio, visual, ecg, eda,
/// then anything else alphabetically.
inline int modality_rank(std::string_view name) {
  static constexpr std::string_view known[] = {"audio", "visual", "ecg", "eda"};
  for (int i = 0; i < 4; ++i)
    if (known[i] == name) return i;
  return 4;
}

inline bool modality_before(const FeatureStream& a, const FeatureStream& b) {
  const int ra = modality_rank(a.modality);
  const int rb = modality_rank(b.modality);
  return ra != rb ? ra < rb : a.modality < b.modality;
}

struct Session {
  std::string participant_id;
  double duration = 0.0;
  LabelRange label_range;
  FrameStream frame_stream;
  std::vector<FeatureStream> feature_streams;  // sorted by modality_before
  std::vector<AnnotationTrace> annotation_traces;
};

struct Window {
  std::string participant_id;
  double start = 0.0;
  double length = 0.0;
  int height = 0;
  int width = 0;
  int channels = 0;
  /// Stacked frames in [0,1], layout (row, col, channel) with channel fastest.
  std::vector<float> pixels;
  /// Per-modality window means, same order as the session's streams.
  std::vector<std::pair<std::string, std::vector<double>>> features;
  double continuous_label = 0.0;

  /// Concatenation of all modality means in fusion order.
  [[nodiscard]] std::vector<double> privileged() const {
    std::vector<double> out;
    for (const auto& [name, values] : features) out.insert(out.end(), values.begin(), values.end());
    return out;
  }
};

struct WindowSpan {
  Millis start = 0;
  Millis length = 0;
  [[nodiscard]] Millis end() const { return start + length; }
  [[nodiscard]] bool contains(Millis t) const { return t >= start && t < start + length; }
};

inline WindowSpan span_of(const Window& w) { return {to_millis(w.start), to_millis(w.length)}; }

/// Window starts {0, step, 2 step, ...} with start + length <= duration.
inline std::vector<WindowSpan> window_spans(double duration, double length, double step) {
  const Millis d = to_millis(duration);
  const Millis l = to_millis(length);
  const Millis s = to_millis(step);
  if (s <= 0 || l <= 0) throw ConfigError("window length and step must be positive");
  if (s > l) throw ConfigError("window step must not exceed window length");
  std::vector<WindowSpan> spans;
  if (l > d) return spans;
  const Millis count = (d - l) / s + 1;
  spans.reserve(static_cast<std::size_t>(count));
  for (Millis k = 0; k < count; ++k) spans.push_back({k * s, l});
  return spans;
}

namespace detail {

inline double median_of(std::vector<double>& values) {
  const std::size_t n = values.size();
  const auto mid = values.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(values.begin(), mid, values.end());
  if (n % 2 == 1) return *mid;
  const double upper = *mid;
  const double lower = *std::max_element(values.begin(), mid);
  return 0.5 * (lower + upper);
}

}  // namespace detail

/// Per-timestamp median across annotators, then the mean of those medians
/// over the timestamps inside the window.
inline double aggregate_label(std::span<const AnnotationTrace> traces, WindowSpan window) {
  if (traces.empty()) throw WindowRejected("no annotation traces supplied");
  const auto& grid = traces.front().timestamps;
  for (const auto& trace : traces) {
    if (trace.timestamps.size() != grid.size() || trace.values.size() != grid.size())
      throw CorpusFormatError("annotation trace '" + trace.annotator_id + "' does not share the timestamp grid");
  }
  std::vector<double> column(traces.size());
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!window.contains(to_millis(grid[i]))) continue;
    for (std::size_t a = 0; a < traces.size(); ++a) column[a] = traces[a].values[i];
    sum += detail::median_of(column);
    ++count;
  }
  if (count == 0)
    throw WindowRejected("no annotation timestamps inside window starting at " +
                         std::to_string(to_seconds(window.start)) + " s");
  return sum / static_cast<double>(count);
}

inline std::vector<double> aggregate_features(const FeatureStream& stream, WindowSpan window) {
  std::vector<double> mean(stream.dim, 0.0);
  std::size_t count = 0;
  for (std::size_t i = 0; i < stream.size(); ++i) {
    if (!window.contains(to_millis(stream.timestamps[i]))) continue;
    const auto row = stream.row(i);
    for (std::size_t j = 0; j < stream.dim; ++j) mean[j] += row[j];
    ++count;
  }
  if (count == 0)
    throw WindowRejected("modality '" + stream.modality + "' has no samples inside window starting at " +
                         std::to_string(to_seconds(window.start)) + " s");
  for (double& v : mean) v /= static_cast<double>(count);
  return mean;
}

inline constexpr double kEffectiveFps = 5.0;

/// Frames kept after skipping, inside the window, concatenated along channels.
inline std::vector<float> stack_frames(const FrameStream& stream, WindowSpan window, int* channels_out = nullptr) {
  if (stream.skip < 1) throw ConfigError("frame skip must be >= 1");
  if (std::abs(stream.effective_fps() - kEffectiveFps) > 1e-9)
    throw ConfigError("native_fps / skip must equal 5 effective frames per second, got " +
                      std::to_string(stream.effective_fps()));
  const auto expected = static_cast<int>(std::llround(kEffectiveFps * to_seconds(window.length)));
  std::vector<std::size_t> picked;
  for (std::size_t i = 0; i < stream.frames.size(); i += static_cast<std::size_t>(stream.skip)) {
    const Millis t = stream.frame_time(i);
    if (t >= window.end()) break;
    if (window.contains(t)) picked.push_back(i);
  }
  if (static_cast<int>(picked.size()) < expected)
    throw WindowRejected("window starting at " + std::to_string(to_seconds(window.start)) + " s has " +
                         std::to_string(picked.size()) + " frames, needs " + std::to_string(expected));
  picked.resize(static_cast<std::size_t>(expected));

  const auto pixels = static_cast<std::size_t>(stream.height) * static_cast<std::size_t>(stream.width);
  const auto c = static_cast<std::size_t>(expected);
  std::vector<float> tensor(pixels * c);
  for (std::size_t k = 0; k < c; ++k) {
    const auto& frame = stream.frames[picked[k]];
    if (frame.size() != pixels) throw CorpusFormatError("frame " + std::to_string(picked[k]) + " has the wrong size");
    for (std::size_t p = 0; p < pixels; ++p) tensor[p * c + k] = static_cast<float>(frame[p]) / 255.0f;
  }
  if (channels_out) *channels_out = expected;
  return tensor;
}

/// Builds fully populated windows. Windows that cannot be populated are
/// skipped and described in `rejected` when a sink is given.
inline std::vector<Window> slice_windows(const Session& session, double length, double step,
                                         std::vector<std::string>* rejected = nullptr) {
  if (!(step > 0.0) || step > length) throw ConfigError("slice_windows requires 0 < step <= length");
  const auto spans = window_spans(session.duration, length, step);
  if (spans.empty())
    throw EmptyDatasetError("session '" + session.participant_id + "' (" + std::to_string(session.duration) +
                            " s) is shorter than one " + std::to_string(length) + " s window");
  std::vector<Window> windows;
  windows.reserve(spans.size());
  for (const auto& span : spans) {
    try {
      Window w;
      w.participant_id = session.participant_id;
      w.start = to_seconds(span.start);
      w.length = to_seconds(span.length);
      w.height = session.frame_stream.height;
      w.width = session.frame_stream.width;
      w.pixels = stack_frames(session.frame_stream, span, &w.channels);
      for (const auto& stream : session.feature_streams)
        w.features.emplace_back(stream.modality, aggregate_features(stream, span));
      w.continuous_label = aggregate_label(session.annotation_traces, span);
      windows.push_back(std::move(w));
    } catch (const WindowRejected& e) {
      if (rejected) rejected->push_back(session.participant_id + ": " + e.what());
    }
  }
  return windows;
}

struct LabelingConfig {
  Task task = Task::classification;
  double split_t = 0.0;
  double epsilon = 0.1;

  void validate(const LabelRange& range) const {
    if (epsilon < 0.0) throw ConfigError("epsilon must be >= 0");
    if (task == Task::classification && (split_t - epsilon < range.lo || split_t + epsilon > range.hi))
      throw ConfigError("uncertainty band [t-eps, t+eps] must lie inside the label range");
  }
};

/// Strictly above t+eps is high, strictly below t-eps is low, anything in the
/// closed band is discarded (nullopt).
inline std::vector<std::optional<AffectClass>> binarize(std::span<const double> labels, const LabelingConfig& cfg) {
  if (cfg.task != Task::classification) throw ConfigError("binarize requires a classification labeling config");
  if (cfg.epsilon < 0.0) throw ConfigError("epsilon must be >= 0");
  std::vector<std::optional<AffectClass>> out;
  out.reserve(labels.size());
  std::size_t kept = 0;
  for (double v : labels) {
    if (v > cfg.split_t + cfg.epsilon) {
      out.emplace_back(AffectClass::high);
      ++kept;
    } else if (v < cfg.split_t - cfg.epsilon) {
      out.emplace_back(AffectClass::low);
      ++kept;
    } else {
      out.emplace_back(std::nullopt);
    }
  }
  if (kept == 0) throw EmptyDatasetError("every label fell inside the uncertainty band");
  return out;
}

inline double median(std::span<const double> values) {
  if (values.empty()) throw EmptyDatasetError("median of an empty set");
  std::vector<double> copy(values.begin(), values.end());
  return detail::median_of(copy);
}

/// Per-feature z-score fitted on one set of vectors. Features whose variance
/// is (numerically) zero map to 0.
class FeatureNormalizer {
 public:
  FeatureNormalizer() = default;
  FeatureNormalizer(std::vector<double> mean, std::vector<double> stddev)
      : mean_(std::move(mean)), stddev_(std::move(stddev)) {}

  /// Each feature column is sorted before summation, so the fitted values are
  /// bit-identical for any ordering of `rows`.
  static FeatureNormalizer fit(std::span<const std::vector<double>> rows) {
    if (rows.size() < 2) throw EmptyDatasetError("normalizer needs at least two training vectors");
    const std::size_t dim = rows.front().size();
    std::vector<double> mean(dim), stddev(dim), column(rows.size());
    for (std::size_t j = 0; j < dim; ++j) {
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != dim) throw ShapeError("normalizer rows differ in dimension");
        column[i] = rows[i][j];
      }
      std::sort(column.begin(), column.end());
      const double m = std::accumulate(column.begin(), column.end(), 0.0) / static_cast<double>(rows.size());
      std::vector<double> sq(column.size());
      for (std::size_t i = 0; i < column.size(); ++i) sq[i] = (column[i] - m) * (column[i] - m);
      std::sort(sq.begin(), sq.end());
      mean[j] = m;
      stddev[j] = std::sqrt(std::accumulate(sq.begin(), sq.end(), 0.0) / static_cast<double>(rows.size()));
    }
    return {std::move(mean), std::move(stddev)};
  }

  [[nodiscard]] std::vector<double> apply(std::span<const double> row) const {
    if (row.size() != mean_.size()) throw ShapeError("normalizer dimension mismatch");
    std::vector<double> out(row.size());
    for (std::size_t j = 0; j < row.size(); ++j)
      out[j] = stddev_[j] < kZeroVariance ? 0.0 : (row[j] - mean_[j]) / stddev_[j];
    return out;
  }

  [[nodiscard]] const std::vector<double>& mean() const { return mean_; }
  [[nodiscard]] const std::vector<double>& stddev() const { return stddev_; }

  static constexpr double kZeroVariance = 1e-12;

 private:
  std::vector<double> mean_;
  std::vector<double> stddev_;
};

inline FeatureNormalizer fit_feature_normalizer(std::span<const Window> train_windows) {
  std::vector<std::vector<double>> rows;
  rows.reserve(train_windows.size());
  for (const auto& w : train_windows) rows.push_back(w.privileged());
  return FeatureNormalizer::fit(rows);
}

/// Returns copies of `windows` whose privileged features are z-scored.
inline std::vector<Window> apply_normalizer(const FeatureNormalizer& normalizer, std::span<const Window> windows) {
  std::vector<Window> out(windows.begin(), windows.end());
  for (auto& w : out) {
    const auto normalized = normalizer.apply(w.privileged());
    std::size_t offset = 0;
    for (auto& [name, values] : w.features) {
      std::copy_n(normalized.begin() + static_cast<std::ptrdiff_t>(offset), values.size(), values.begin());
      offset += values.size();
    }
  }
  return out;
}

}  // namespace lupi
