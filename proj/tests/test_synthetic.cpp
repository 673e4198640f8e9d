#include <gtest/gtest.h>

#include <Eigen/Dense>

#include "lupi/stats.hpp"
#include "lupi/synthetic.hpp"

using namespace lupi;

namespace {

double lag1_autocorrelation(const std::vector<double>& x) {
  const double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  double num = 0, den = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    den += (x[i] - m) * (x[i] - m);
    if (i + 1 < x.size()) num += (x[i] - m) * (x[i + 1] - m);
  }
  return num / den;
}

/// Least-squares probe with intercept: fits on (X_fit, y_fit), returns PCC on (X_eval, y_eval).
double probe_pcc(const Eigen::MatrixXd& x_fit, const Eigen::VectorXd& y_fit, const Eigen::MatrixXd& x_eval,
                 const Eigen::VectorXd& y_eval) {
  Eigen::MatrixXd a(x_fit.rows(), x_fit.cols() + 1);
  a << x_fit, Eigen::VectorXd::Ones(x_fit.rows());
  const Eigen::VectorXd w = a.completeOrthogonalDecomposition().solve(y_fit);
  Eigen::MatrixXd b(x_eval.rows(), x_eval.cols() + 1);
  b << x_eval, Eigen::VectorXd::Ones(x_eval.rows());
  const Eigen::VectorXd pred = b * w;
  std::vector<double> p(pred.data(), pred.data() + pred.size()), t(y_eval.data(), y_eval.data() + y_eval.size());
  return pcc(p, t).value_or(0.0);
}

/// Row position of the intensity centroid of a frame (background removed).
double centroid_row(const std::vector<std::uint8_t>& frame, int height, int width) {
  double base = 255;
  for (auto v : frame) base = std::min(base, static_cast<double>(v));
  double mass = 0, row = 0;
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) {
      const double v = frame[static_cast<std::size_t>(r * width + c)] - base;
      mass += v;
      row += v * r;
    }
  return mass > 0 ? row / mass : 0.5 * height;
}

}  // namespace

TEST(Latent, FullSmoothingIsConstant) {
  const auto t = generate_latent(3, 10.0, 1.0, {-1, 1});
  for (double v : t.values) EXPECT_EQ(v, t.values.front());
}

TEST(Latent, DeterministicAndBounded) {
  const auto a = generate_latent(11, 30.0, 0.95, {-1, 1});
  const auto b = generate_latent(11, 30.0, 0.95, {-1, 1});
  EXPECT_EQ(a.values, b.values);
  EXPECT_NE(a.values, generate_latent(12, 30.0, 0.95, {-1, 1}).values);
  for (double v : a.values) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_EQ(a.timestamps.size(), 751u);
  EXPECT_DOUBLE_EQ(a.timestamps[25], 1.0);
}

TEST(Latent, Lag1AutocorrelationOver100Seeds) {
  double worst = 1.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto t = generate_latent(seed, 60.0, 0.95, {-1, 1});
    worst = std::min(worst, lag1_autocorrelation(t.values));
  }
  EXPECT_GE(worst, 0.9);
}

TEST(Privileged, IdentityReadout) {
  const auto latent = generate_latent(1, 5.0, 0.9, {-1, 1});
  PrivilegedReadout r{1, {1.0, 0.0, 0.0}};
  const auto s = emit_privileged(latent, r, 0.0, 2);
  ASSERT_EQ(s.dim, 1u);
  for (std::size_t i = 0; i < latent.values.size(); ++i) EXPECT_DOUBLE_EQ(s.values[i], latent.values[i]);
}

TEST(Privileged, NoiselessLinearProbe) {
  GeneratorConfig g;
  const auto latent = generate_latent(5, 60.0, 0.95, g.label_range);
  const auto r = PrivilegedReadout::seeded(16, 9);
  const auto s = emit_privileged(latent, r, 0.0, 1);
  const auto n = static_cast<Eigen::Index>(s.size());
  Eigen::MatrixXd x(n, 16);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < 16; ++j) x(i, j) = s.row(static_cast<std::size_t>(i))[static_cast<std::size_t>(j)];
    y(i) = latent.values[static_cast<std::size_t>(i)];
  }
  EXPECT_GE(probe_pcc(x, y, x, y), 0.99);
}

TEST(Privileged, NoiseRealizationsDifferReadoutShared) {
  const auto latent = generate_latent(5, 5.0, 0.95, {-1, 1});
  const auto r = PrivilegedReadout::seeded(4, 9);
  EXPECT_EQ(r.weights, PrivilegedReadout::seeded(4, 9).weights);
  const auto a = emit_privileged(latent, r, 0.3, 1);
  const auto b = emit_privileged(latent, r, 0.3, 2);
  EXPECT_NE(a.values, b.values);
  EXPECT_EQ(a.values, emit_privileged(latent, r, 0.3, 1).values);
}

TEST(Frames, MidpointBlobCentered) {
  LatentTrace t{{0.0}, {0.0}};
  const auto fs = emit_frames(t, 33, 17, 0.0, 1, {-1, 1});
  ASSERT_EQ(fs.frames.size(), 1u);
  const auto& f = fs.frames[0];
  int best = 0;
  for (int r = 0; r < 33; ++r)
    if (f[static_cast<std::size_t>(r * 17 + 8)] > f[static_cast<std::size_t>(best * 17 + 8)]) best = r;
  EXPECT_EQ(best, 16);
}

TEST(Frames, NoiselessCentroidRecoversLatent) {
  const auto latent = generate_latent(8, 60.0, 0.95, {-1, 1});
  const auto fs = emit_frames(latent, 32, 18, 0.0, 1, {-1, 1});
  std::vector<double> rows, xs;
  for (std::size_t f = 0; f < fs.frames.size(); f += 5) {
    rows.push_back(centroid_row(fs.frames[f], 32, 18));
    xs.push_back(latent.values[f]);
  }
  EXPECT_GE(std::abs(pcc(rows, xs).value()), 0.98);
}

TEST(Frames, HighNoiseCentroidWorseThanPrivilegedProbe) {
  const auto latent = generate_latent(8, 60.0, 0.95, {-1, 1});
  const Appearance look;
  const auto fs = emit_frames(latent, 32, 18, look.amplitude, 1, {-1, 1}, look);
  std::vector<double> rows, xs;
  for (std::size_t f = 0; f < fs.frames.size(); ++f) {
    rows.push_back(centroid_row(fs.frames[f], 32, 18));
    xs.push_back(latent.values[f]);
  }
  const double pixel = std::abs(pcc(rows, xs).value_or(0.0));

  const auto r = PrivilegedReadout::seeded(16, 9);
  const auto s = emit_privileged(latent, r, look.amplitude, 2);
  const auto n = static_cast<Eigen::Index>(s.size());
  Eigen::MatrixXd x(n, 16);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < 16; ++j) x(i, j) = s.row(static_cast<std::size_t>(i))[static_cast<std::size_t>(j)];
    y(i) = latent.values[static_cast<std::size_t>(i)];
  }
  EXPECT_LT(pixel, probe_pcc(x, y, x, y));
}

TEST(Frames, Quantized8BitAndSized) {
  const auto latent = generate_latent(2, 2.0, 0.95, {-1, 1});
  const auto fs = emit_frames(latent, 32, 18, 0.5, 3, {-1, 1});
  EXPECT_EQ(fs.frames.size(), 51u);
  for (const auto& f : fs.frames) EXPECT_EQ(f.size(), 32u * 18u);
  EXPECT_DOUBLE_EQ(fs.effective_fps(), 5.0);
}

TEST(Annotations, NoiselessEqualsLatent) {
  const auto latent = generate_latent(4, 10.0, 0.95, {-1, 1});
  for (const auto& t : emit_annotations(latent, 3, 0.0, 0.0, 7, {-1, 1})) EXPECT_EQ(t.values, latent.values);
}

TEST(Annotations, SingleAnnotatorConstantOffset) {
  const auto latent = generate_latent(4, 10.0, 0.95, {-1, 1});
  const auto traces = emit_annotations(latent, 1, 0.1, 0.0, 7, {-1, 1});
  ASSERT_EQ(traces.size(), 1u);
  // Recover the offset from an unclipped tick, then check every tick.
  double b = 0.0;
  for (std::size_t i = 0; i < latent.values.size(); ++i)
    if (std::abs(traces[0].values[i]) < 1.0) {
      b = traces[0].values[i] - latent.values[i];
      break;
    }
  for (std::size_t i = 0; i < latent.values.size(); ++i)
    EXPECT_NEAR(traces[0].values[i], std::clamp(latent.values[i] + b, -1.0, 1.0), 1e-12);
}

TEST(Annotations, MedianConcentration) {
  const double noise = 0.1;
  double total = 0.0;
  std::size_t count = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto latent = generate_latent(seed, 20.0, 0.95, {-1, 1});
    const auto traces = emit_annotations(latent, 6, 0.0, noise, seed + 100, {-1, 1});
    for (std::size_t i = 0; i < latent.values.size(); ++i) {
      std::vector<double> col;
      for (const auto& t : traces) col.push_back(t.values[i]);
      std::sort(col.begin(), col.end());
      total += std::abs(0.5 * (col[2] + col[3]) - latent.values[i]);
      ++count;
    }
  }
  EXPECT_LE(total / static_cast<double>(count), noise);
}

TEST(Corpus, DefaultsOrderInformativeness) {
  const GeneratorConfig g;
  EXPECT_LT(g.privileged_noise_std, g.pixel_noise_std);
}

TEST(Corpus, DeterministicAndUnique) {
  GeneratorConfig g;
  g.n_participants = 3;
  g.session_duration = 4.0;
  const auto a = generate_corpus(g);
  const auto b = generate_corpus(g);
  ASSERT_EQ(a.size(), 3u);
  std::set<std::string> ids;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ids.insert(a[i].participant_id);
    EXPECT_EQ(a[i].frame_stream.frames, b[i].frame_stream.frames);
    EXPECT_EQ(a[i].annotation_traces[0].values, b[i].annotation_traces[0].values);
    EXPECT_EQ(a[i].feature_streams.size(), 4u);
    EXPECT_EQ(a[i].annotation_traces.size(), 6u);
    EXPECT_EQ(a[i].frame_stream.frames.size(), 101u);
    EXPECT_EQ(a[i].feature_streams[0].timestamps.back(), 4.0);
  }
  EXPECT_EQ(ids.size(), 3u);
  g.seed = 8;
  EXPECT_NE(generate_corpus(g)[0].frame_stream.frames, a[0].frame_stream.frames);
}

TEST(Corpus, PrivilegedLinearProbeBeatsPixelProbe) {
  for (std::uint64_t seed : {7u, 8u, 9u}) {
    GeneratorConfig g;
    g.seed = seed;
    const auto sessions = generate_corpus(g);
    // Window-level probes: privileged means vs 4x4-block-averaged pixels
    // (mean over the stacked frames); fit on 14 participants, score on 6.
    std::vector<std::vector<double>> priv, pix;
    std::vector<double> y;
    std::vector<bool> fit_side;
    for (std::size_t s = 0; s < sessions.size(); ++s) {
      for (const auto& w : slice_windows(sessions[s], 1.0, 0.4)) {
        priv.push_back(w.privileged());
        std::vector<double> blocks(8 * 5, 0.0), counts(8 * 5, 0.0);
        for (int r = 0; r < w.height; ++r)
          for (int c = 0; c < w.width; ++c)
            for (int k = 0; k < w.channels; ++k) {
              const auto b = static_cast<std::size_t>((r / 4) * 5 + c / 4);
              blocks[b] += w.pixels[static_cast<std::size_t>((r * w.width + c) * w.channels + k)];
              counts[b] += 1;
            }
        for (std::size_t b = 0; b < blocks.size(); ++b) blocks[b] /= counts[b];
        pix.push_back(blocks);
        y.push_back(w.continuous_label);
        fit_side.push_back(s < 14);
      }
    }
    const auto probe = [&](const std::vector<std::vector<double>>& feats) {
      std::vector<std::size_t> fit, eval;
      for (std::size_t i = 0; i < y.size(); ++i) (fit_side[i] ? fit : eval).push_back(i);
      const auto d = static_cast<Eigen::Index>(feats[0].size());
      const auto build = [&](const std::vector<std::size_t>& idx, Eigen::MatrixXd& x, Eigen::VectorXd& t) {
        x.resize(static_cast<Eigen::Index>(idx.size()), d);
        t.resize(static_cast<Eigen::Index>(idx.size()));
        for (std::size_t i = 0; i < idx.size(); ++i) {
          for (Eigen::Index j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), j) = feats[idx[i]][static_cast<std::size_t>(j)];
          t(static_cast<Eigen::Index>(i)) = y[idx[i]];
        }
      };
      Eigen::MatrixXd xf, xe;
      Eigen::VectorXd yf, ye;
      build(fit, xf, yf);
      build(eval, xe, ye);
      return probe_pcc(xf, yf, xe, ye);
    };
    EXPECT_GT(probe(priv), probe(pix)) << "seed " << seed;
  }
}
