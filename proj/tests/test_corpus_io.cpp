#include <gtest/gtest.h>

#include <fstream>

#include "lupi/corpus_io.hpp"
#include "lupi/synthetic.hpp"

using namespace lupi;

namespace {

GeneratorConfig small_config() {
  GeneratorConfig g;
  g.n_participants = 3;
  g.session_duration = 3.0;
  g.frame_height = 12;
  g.frame_width = 10;
  g.privileged_dim = 6;
  return g;
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("lupi_test_corpus_io_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

}  // namespace

TEST(CorpusIo, RoundTripIsLossless) {
  const auto sessions = generate_corpus(small_config());
  const auto root = scratch("roundtrip");
  write_corpus(sessions, root, false);
  const auto back = read_corpus(root);
  ASSERT_EQ(back.size(), sessions.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    const auto& a = sessions[i];
    const auto& b = back[i];
    EXPECT_EQ(a.participant_id, b.participant_id);
    EXPECT_EQ(a.duration, b.duration);
    EXPECT_EQ(a.frame_stream.frames, b.frame_stream.frames);
    EXPECT_EQ(a.frame_stream.height, b.frame_stream.height);
    ASSERT_EQ(a.feature_streams.size(), b.feature_streams.size());
    for (std::size_t f = 0; f < a.feature_streams.size(); ++f) {
      EXPECT_EQ(a.feature_streams[f].modality, b.feature_streams[f].modality);
      EXPECT_EQ(a.feature_streams[f].values, b.feature_streams[f].values);
      for (std::size_t t = 0; t < a.feature_streams[f].timestamps.size(); ++t)
        EXPECT_EQ(to_millis(a.feature_streams[f].timestamps[t]), to_millis(b.feature_streams[f].timestamps[t]));
    }
    ASSERT_EQ(a.annotation_traces.size(), b.annotation_traces.size());
    for (std::size_t t = 0; t < a.annotation_traces.size(); ++t) {
      EXPECT_EQ(a.annotation_traces[t].annotator_id, b.annotation_traces[t].annotator_id);
      EXPECT_EQ(a.annotation_traces[t].values, b.annotation_traces[t].values);
    }
    // Windows built from either copy agree exactly.
    const auto wa = slice_windows(a, 1.0, 0.4);
    const auto wb = slice_windows(b, 1.0, 0.4);
    ASSERT_EQ(wa.size(), wb.size());
    for (std::size_t k = 0; k < wa.size(); ++k) {
      EXPECT_EQ(wa[k].pixels, wb[k].pixels);
      EXPECT_EQ(wa[k].continuous_label, wb[k].continuous_label);
      EXPECT_EQ(wa[k].privileged(), wb[k].privileged());
    }
  }
  EXPECT_TRUE(validate_corpus(root).ok());
  fs::remove_all(root);
}

TEST(CorpusIo, RegenerationHashIdentical) {
  const auto a = scratch("hash_a"), b = scratch("hash_b");
  write_corpus(generate_corpus(small_config()), a, false);
  write_corpus(generate_corpus(small_config()), b, false);
  EXPECT_EQ(corpus_hash(a), corpus_hash(b));
  auto other = small_config();
  other.seed = 99;
  write_corpus(generate_corpus(other), b, true);
  EXPECT_NE(corpus_hash(a), corpus_hash(b));
  EXPECT_EQ(corpus_hash(generate_corpus(small_config())), corpus_hash(generate_corpus(small_config())));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(CorpusIo, OverwriteRefusedWithoutFlag) {
  const auto root = scratch("overwrite");
  const auto sessions = generate_corpus(small_config());
  write_corpus(sessions, root, false);
  EXPECT_THROW(write_corpus(sessions, root, false), ConfigError);
  EXPECT_NO_THROW(write_corpus(sessions, root, true));
  fs::remove_all(root);
}

TEST(CorpusIo, WrongColumnCountNamesFileAndRow) {
  const auto root = scratch("columns");
  write_corpus(generate_corpus(small_config()), root, false);
  const auto file = root / "P02" / "features_audio.csv";
  auto text = slurp(file);
  // Drop the last value of the third data row (file line 4).
  std::size_t pos = 0;
  for (int line = 0; line < 3; ++line) pos = text.find('\n', pos) + 1;
  const auto end = text.find('\n', pos);
  const auto comma = text.rfind(',', end);
  text.erase(comma, end - comma);
  spit(file, text);
  const auto report = validate_corpus(root);
  EXPECT_FALSE(report.ok());
  bool named = false;
  for (const auto& s : report.sessions)
    for (const auto& p : s.problems)
      if (p.find("features_audio.csv") != std::string::npos && p.find(":4") != std::string::npos) named = true;
  EXPECT_TRUE(named);
  EXPECT_THROW(read_corpus(root), CorpusFormatError);
  fs::remove_all(root);
}

TEST(CorpusIo, MissingAnnotationsRejected) {
  const auto root = scratch("annotations");
  write_corpus(generate_corpus(small_config()), root, false);
  fs::remove(root / "P01" / "annotations.csv");
  const auto report = validate_corpus(root);
  EXPECT_FALSE(report.ok());
  EXPECT_FALSE(report.sessions[0].ok);
  EXPECT_TRUE(report.sessions[1].ok);
  EXPECT_NE(report.sessions[0].problems[0].find("annotations"), std::string::npos);
  fs::remove_all(root);
}

TEST(CorpusIo, DimensionSpecificAnnotations) {
  const auto root = scratch("dimension");
  write_corpus(generate_corpus(small_config()), root, false);
  auto text = slurp(root / "P01" / "annotations.csv");
  spit(root / "P01" / "annotations_valence.csv", text);
  const auto arousal = read_session(root / "P01", "arousal");
  const auto valence = read_session(root / "P01", "valence");
  EXPECT_EQ(arousal.annotation_traces[0].values, valence.annotation_traces[0].values);
  fs::remove_all(root);
}

TEST(CorpusIo, ProfileDimensionsChecked) {
  const auto root = scratch("profile");
  write_corpus(generate_corpus(small_config()), root, false);
  const auto report = validate_corpus(root, "recola");
  EXPECT_FALSE(report.ok());
  bool mentions = false;
  for (const auto& p : report.sessions[0].problems) mentions |= p.find("expects 131") != std::string::npos;
  EXPECT_TRUE(mentions);
  EXPECT_EQ(reference_modalities().at("recola").at("eda"), 63u);
  EXPECT_EQ(reference_modalities().at("sewa").at("audio"), 65u);
  fs::remove_all(root);
}

TEST(CorpusIo, DeclaredDimensionMismatch) {
  const auto root = scratch("declared");
  write_corpus(generate_corpus(small_config()), root, false);
  auto meta = slurp(root / "P03" / "meta.json");
  const auto pos = meta.find("\"audio\": 2");
  ASSERT_NE(pos, std::string::npos);
  meta.replace(pos, 10, "\"audio\": 3");
  spit(root / "P03" / "meta.json", meta);
  EXPECT_THROW(read_session(root / "P03"), CorpusFormatError);
  fs::remove_all(root);
}

TEST(CorpusIo, DuplicateParticipantFlagged) {
  const auto root = scratch("duplicate");
  write_corpus(generate_corpus(small_config()), root, false);
  fs::copy(root / "P01", root / "P01_copy", fs::copy_options::recursive);
  const auto report = validate_corpus(root);
  EXPECT_FALSE(report.ok());
  fs::remove_all(root);
}

TEST(CorpusIo, AnnotationOutOfRangeRejected) {
  const auto root = scratch("range");
  write_corpus(generate_corpus(small_config()), root, false);
  auto text = slurp(root / "P01" / "annotations.csv");
  const auto line2 = text.find('\n') + 1;
  const auto comma = text.find(',', line2);
  const auto next = text.find(',', comma + 1);
  text.replace(comma + 1, next - comma - 1, "7.5");
  spit(root / "P01" / "annotations.csv", text);
  EXPECT_THROW(read_session(root / "P01"), CorpusFormatError);
  fs::remove_all(root);
}

TEST(CorpusIo, PgmRoundTrip) {
  const auto dir = scratch("pgm");
  fs::create_directories(dir);
  std::vector<std::uint8_t> px(6 * 4);
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<std::uint8_t>(i * 10);
  io::write_pgm(dir / "a.pgm", 6, 4, px);
  int h = 0, w = 0;
  EXPECT_EQ(io::read_pgm(dir / "a.pgm", h, w), px);
  EXPECT_EQ(h, 6);
  EXPECT_EQ(w, 4);
  EXPECT_EQ(io::frame_name(12), "000012.pgm");
  fs::remove_all(dir);
}
