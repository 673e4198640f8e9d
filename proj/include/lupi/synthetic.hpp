///
/// \file synthetic.hpp
/// \brief Seeded multimodal sessions with a known latent affect trace.
///
/// Every session is driven by one latent trace x(t) sampled at 25 Hz. The
/// privileged modalities read it out through a fixed nonlinear map, the frames
/// render it as a blob whose height and brightness track x, and the
/// annotators see it through a per-annotator bias and per-tick noise.
///
/// Seeds: session i uses derive_seed(cfg.seed, i); each stream inside it uses
/// derive_seed(session_seed, "<stream name>"). Nothing depends on generation
/// order, so sessions can be produced in parallel.
///
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "lupi/common.hpp"
#include "lupi/windowing.hpp"

namespace lupi {

struct GeneratorConfig {
  std::uint64_t seed = 7;
  int n_participants = 20;
  double session_duration = 60.0;
  double latent_smoothness = 0.95;
  /// Long-run per-tick standard deviation of the latent random walk.
  double latent_volatility = 0.02;
  double privileged_noise_std = 1.0;
  double pixel_noise_std = 1.2;
  int privileged_dim = 16;
  int frame_height = 32;
  int frame_width = 18;
  double native_fps = 25.0;
  int frame_skip = 5;
  int n_annotators = 6;
  double annotator_noise_std = 0.1;
  double annotator_bias_std = 0.3;
  /// Between-participant spread of blob placement, size and background.
  double appearance_variability = 1.0;
  LabelRange label_range{-1.0, 1.0};

  void validate() const {
    if (n_participants < 1) throw ConfigError("n_participants must be >= 1");
    if (!(session_duration > 0.0)) throw ConfigError("session_duration must be > 0");
    if (!(latent_smoothness > 0.0 && latent_smoothness <= 1.0)) throw ConfigError("latent_smoothness must be in (0,1]");
    if (latent_volatility < 0 || privileged_noise_std < 0 || pixel_noise_std < 0 || annotator_noise_std < 0 ||
        annotator_bias_std < 0 || appearance_variability < 0)
      throw ConfigError("standard deviations must be >= 0");
    if (privileged_dim < 1) throw ConfigError("privileged_dim must be >= 1");
    if (frame_height < 8 || frame_width < 8) throw ConfigError("frame resolution must be at least 8x8");
    if (n_annotators < 1) throw ConfigError("n_annotators must be >= 1");
    if (frame_skip < 1) throw ConfigError("frame_skip must be >= 1");
    if (!(label_range.lo < label_range.hi)) throw ConfigError("label_range must have lo < hi");
  }
};

inline constexpr double kAnnotationHz = 25.0;

struct LatentTrace {
  std::vector<double> timestamps;
  std::vector<double> values;
};

inline std::vector<double> tick_times(double duration, double hz) {
  const auto n = static_cast<std::size_t>(std::llround(duration * hz)) + 1;
  std::vector<double> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<double>(i) / hz;
  return t;
}

inline double reflect_into(double v, const LabelRange& range) {
  for (int guard = 0; guard < 8 && (v < range.lo || v > range.hi); ++guard) {
    if (v > range.hi) v = 2.0 * range.hi - v;
    if (v < range.lo) v = 2.0 * range.lo - v;
  }
  return range.clip(v);
}

/// Bounded smoothed random walk. Increments are Gaussian, low-pass filtered
/// with coefficient `smoothness`, and the walk is reflected at the bounds.
inline LatentTrace generate_latent(std::uint64_t seed, double duration, double smoothness, const LabelRange& range,
                                   double volatility = GeneratorConfig{}.latent_volatility) {
  if (!(duration > 0.0)) throw ConfigError("latent duration must be > 0");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> start(range.lo + 0.1 * (range.hi - range.lo),
                                               range.hi - 0.1 * (range.hi - range.lo));
  LatentTrace trace;
  trace.timestamps = tick_times(duration, kAnnotationHz);
  trace.values.resize(trace.timestamps.size());
  double x = start(rng);
  double increment = 0.0;
  for (double& v : trace.values) {
    v = x;
    increment = smoothness * increment + (1.0 - smoothness) * volatility * gauss(rng);
    x = reflect_into(x + increment, range);
  }
  return trace;
}

/// Fixed linear map from phi(x) = [x, x^2, sin(pi x)] to the privileged space.
struct PrivilegedReadout {
  int dim = 0;
  std::vector<double> weights;  // dim x 3, row-major

  static PrivilegedReadout seeded(int dim, std::uint64_t seed) {
    if (dim < 1) throw ConfigError("privileged dim must be >= 1");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    PrivilegedReadout r{dim, std::vector<double>(static_cast<std::size_t>(dim) * 3)};
    for (double& w : r.weights) w = gauss(rng);
    return r;
  }
};

inline FeatureStream emit_privileged(const LatentTrace& latent, const PrivilegedReadout& readout, double noise_std,
                                     std::uint64_t seed, std::string modality = "audio") {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  FeatureStream s;
  s.modality = std::move(modality);
  s.dim = static_cast<std::size_t>(readout.dim);
  s.timestamps = latent.timestamps;
  s.values.resize(latent.values.size() * s.dim);
  for (std::size_t i = 0; i < latent.values.size(); ++i) {
    const double x = latent.values[i];
    const double phi[3] = {x, x * x, std::sin(std::numbers::pi * x)};
    for (std::size_t j = 0; j < s.dim; ++j) {
      const double* w = &readout.weights[j * 3];
      s.values[i * s.dim + j] = w[0] * phi[0] + w[1] * phi[1] + w[2] * phi[2] + noise_std * gauss(rng);
    }
  }
  return s;
}

/// Per-participant rendering nuisance: where the blob sits horizontally, how
/// wide it is and how bright the background is.
struct Appearance {
  double column = 0.5;       // fraction of width
  double spread = 0.12;      // blob sigma as fraction of height
  double background = 0.3;   // intensity in [0,1]
  double amplitude = 0.4;    // blob peak above background at the range midpoint

  static Appearance seeded(std::uint64_t seed, double variability) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    Appearance a;
    a.column += 0.15 * variability * unit(rng);
    a.spread *= 1.0 + 0.3 * variability * unit(rng);
    a.background += 0.1 * variability * unit(rng);
    a.amplitude *= 1.0 + 0.25 * variability * unit(rng);
    return a;
  }
};

/// Vertical blob position as a fraction of height: 0.5 at the range midpoint,
/// moving up as x grows.
inline double blob_row_fraction(double x, const LabelRange& range) {
  const double u = (x - range.midpoint()) / (0.5 * (range.hi - range.lo));
  return 0.5 - 0.3 * u;
}

inline FrameStream emit_frames(const LatentTrace& latent, int height, int width, double pixel_noise_std,
                               std::uint64_t seed, const LabelRange& range = {}, const Appearance& look = {},
                               double native_fps = 25.0, int skip = 5) {
  if (height < 8 || width < 8) throw ConfigError("frame resolution must be at least 8x8");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  FrameStream fs;
  fs.height = height;
  fs.width = width;
  fs.native_fps = native_fps;
  fs.skip = skip;
  // One frame per native tick; the latent is interpolated (nearest tick) when
  // the native rate differs from the annotation rate.
  const auto n_frames = static_cast<std::size_t>(std::llround(latent.timestamps.back() * native_fps)) + 1;
  fs.frames.resize(n_frames);
  const double cx = look.column * (width - 1);
  const double sigma = look.spread * height;
  for (std::size_t f = 0; f < n_frames; ++f) {
    const auto tick = std::min(latent.values.size() - 1,
                               static_cast<std::size_t>(std::llround(static_cast<double>(f) / native_fps * kAnnotationHz)));
    const double x = latent.values[tick];
    const double u = (x - range.midpoint()) / (0.5 * (range.hi - range.lo));
    const double cy = blob_row_fraction(x, range) * (height - 1);
    const double amp = look.amplitude * (1.0 + 0.25 * u);
    auto& frame = fs.frames[f];
    frame.resize(static_cast<std::size_t>(height) * static_cast<std::size_t>(width));
    for (int r = 0; r < height; ++r) {
      for (int c = 0; c < width; ++c) {
        const double d2 = ((r - cy) * (r - cy) + (c - cx) * (c - cx)) / (2.0 * sigma * sigma);
        double v = look.background + amp * std::exp(-d2);
        if (pixel_noise_std > 0.0) v += pixel_noise_std * gauss(rng);
        v = std::clamp(v, 0.0, 1.0);
        frame[static_cast<std::size_t>(r * width + c)] = static_cast<std::uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  return fs;
}

inline std::vector<AnnotationTrace> emit_annotations(const LatentTrace& latent, int n_annotators, double bias_std,
                                                     double noise_std, std::uint64_t seed,
                                                     const LabelRange& range = {}) {
  if (n_annotators < 1) throw ConfigError("n_annotators must be >= 1");
  std::vector<AnnotationTrace> traces;
  for (int a = 0; a < n_annotators; ++a) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(a)));
    std::normal_distribution<double> gauss(0.0, 1.0);
    AnnotationTrace t;
    t.annotator_id = "A" + std::to_string(a + 1);
    t.timestamps = latent.timestamps;
    t.values.resize(latent.values.size());
    const double bias = bias_std * gauss(rng);
    for (std::size_t i = 0; i < latent.values.size(); ++i)
      t.values[i] = range.clip(latent.values[i] + bias + noise_std * gauss(rng));
    traces.push_back(std::move(t));
  }
  return traces;
}

inline std::string participant_name(int index) {
  std::string digits = std::to_string(index + 1);
  if (digits.size() < 2) digits.insert(0, 1, '0');
  return "P" + digits;
}

/// Splits the fused privileged dimension across audio/visual/ecg/eda.
inline std::vector<std::pair<std::string, int>> privileged_layout(int dim) {
  static const char* names[] = {"audio", "visual", "ecg", "eda"};
  const int parts = std::min(dim, 4);
  std::vector<std::pair<std::string, int>> out;
  for (int i = 0; i < parts; ++i) out.emplace_back(names[i], dim / parts + (i < dim % parts ? 1 : 0));
  return out;
}

inline Session generate_session(const GeneratorConfig& cfg, int index, const PrivilegedReadout& readout) {
  const std::uint64_t s = derive_seed(cfg.seed, static_cast<std::uint64_t>(index));
  Session session;
  session.participant_id = participant_name(index);
  session.duration = cfg.session_duration;
  session.label_range = cfg.label_range;
  const auto latent = generate_latent(derive_seed(s, "latent"), cfg.session_duration, cfg.latent_smoothness,
                                      cfg.label_range, cfg.latent_volatility);
  const auto full = emit_privileged(latent, readout, cfg.privileged_noise_std, derive_seed(s, "privileged"));
  std::size_t offset = 0;
  for (const auto& [name, dim] : privileged_layout(cfg.privileged_dim)) {
    FeatureStream part;
    part.modality = name;
    part.dim = static_cast<std::size_t>(dim);
    part.timestamps = full.timestamps;
    part.values.reserve(full.size() * part.dim);
    for (std::size_t i = 0; i < full.size(); ++i) {
      const auto row = full.row(i);
      part.values.insert(part.values.end(), row.begin() + static_cast<std::ptrdiff_t>(offset),
                         row.begin() + static_cast<std::ptrdiff_t>(offset + part.dim));
    }
    offset += part.dim;
    session.feature_streams.push_back(std::move(part));
  }
  const auto look = Appearance::seeded(derive_seed(s, "appearance"), cfg.appearance_variability);
  session.frame_stream = emit_frames(latent, cfg.frame_height, cfg.frame_width, cfg.pixel_noise_std,
                                     derive_seed(s, "frames"), cfg.label_range, look, cfg.native_fps, cfg.frame_skip);
  session.annotation_traces = emit_annotations(latent, cfg.n_annotators, cfg.annotator_bias_std,
                                               cfg.annotator_noise_std, derive_seed(s, "annotations"),
                                               cfg.label_range);
  return session;
}

/// In-memory corpus. Use write_corpus (corpus_io.hpp) to persist it.
inline std::vector<Session> generate_corpus(const GeneratorConfig& cfg) {
  cfg.validate();
  const auto readout = PrivilegedReadout::seeded(cfg.privileged_dim, derive_seed(cfg.seed, "readout"));
  std::vector<Session> sessions;
  sessions.reserve(static_cast<std::size_t>(cfg.n_participants));
  for (int i = 0; i < cfg.n_participants; ++i) sessions.push_back(generate_session(cfg, i, readout));
  return sessions;
}

}  // namespace lupi
