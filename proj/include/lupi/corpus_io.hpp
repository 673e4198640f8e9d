///
/// \file corpus_io.hpp
/// \brief On-disk corpus layout shared by the generator and real-data ingestion.
///
/// One directory per session:
///   meta.json                 participant_id, duration, fps, skip, label_range, ...
///   frames/NNNNNN.pgm         8-bit grayscale (binary PGM), zero-padded frame index
///   features_<modality>.csv   header `t,f0,f1,...`
///   annotations.csv           header `t,<annotator_id>,...`
/// Timestamps are written with three decimals, values with round-trip precision.
///
#pragma once

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lupi/common.hpp"
#include "lupi/windowing.hpp"

namespace lupi {

namespace fs = std::filesystem;

namespace io {

inline std::string format_time(double t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", t);
  return buf;
}

inline std::string format_value(double v) {
  char buf[40];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, end};
}

inline double parse_double(std::string_view text, const fs::path& file, std::size_t line) {
  double v = 0.0;
  const auto* first = text.data();
  const auto* last = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc{} || ptr != last)
    throw CorpusFormatError(file.string() + ":" + std::to_string(line) + ": cannot parse number '" +
                            std::string(text) + "'");
  return v;
}

inline std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t pos = 0;
  while (true) {
    const auto comma = line.find(',', pos);
    cells.push_back(line.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  return cells;
}

struct CsvTable {
  std::vector<std::string> header;
  std::vector<double> t;
  std::vector<double> values;  // row-major, header.size() - 1 per row
};

inline CsvTable read_time_csv(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw CorpusFormatError(file.string() + ": cannot open");
  CsvTable table;
  std::string line;
  if (!std::getline(in, line)) throw CorpusFormatError(file.string() + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  for (auto cell : split_csv(line)) table.header.emplace_back(cell);
  if (table.header.empty() || table.header.front() != "t")
    throw CorpusFormatError(file.string() + ":1: header must start with 't'");
  const std::size_t columns = table.header.size();
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != columns)
      throw CorpusFormatError(file.string() + ":" + std::to_string(row) + ": expected " + std::to_string(columns) +
                              " columns, found " + std::to_string(cells.size()));
    table.t.push_back(parse_double(cells[0], file, row));
    for (std::size_t c = 1; c < columns; ++c) table.values.push_back(parse_double(cells[c], file, row));
  }
  return table;
}

inline void write_pgm(const fs::path& file, int height, int width, const std::vector<std::uint8_t>& pixels) {
  std::ofstream out(file, std::ios::binary);
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (!out) throw CorpusFormatError(file.string() + ": write failed");
}

inline std::vector<std::uint8_t> read_pgm(const fs::path& file, int& height, int& width) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw CorpusFormatError(file.string() + ": cannot open");
  std::string magic;
  int maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (magic != "P5" || maxval != 255 || width <= 0 || height <= 0)
    throw CorpusFormatError(file.string() + ": not an 8-bit binary PGM");
  in.get();
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(width) * static_cast<std::size_t>(height));
  in.read(reinterpret_cast<char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(pixels.size()))
    throw CorpusFormatError(file.string() + ": truncated pixel data");
  return pixels;
}

inline std::string frame_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu.pgm", index);
  return buf;
}

}  // namespace io

inline void write_session(const Session& s, const fs::path& dir) {
  fs::create_directories(dir / "frames");
  nlohmann::ordered_json meta;
  meta["participant_id"] = s.participant_id;
  meta["duration"] = s.duration;
  meta["fps"] = s.frame_stream.native_fps;
  meta["skip"] = s.frame_stream.skip;
  meta["frame_height"] = s.frame_stream.height;
  meta["frame_width"] = s.frame_stream.width;
  meta["n_frames"] = s.frame_stream.frames.size();
  meta["label_range"] = {s.label_range.lo, s.label_range.hi};
  nlohmann::ordered_json modalities = nlohmann::ordered_json::object();
  for (const auto& f : s.feature_streams) modalities[f.modality] = f.dim;
  meta["modalities"] = modalities;
  std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';

  for (std::size_t i = 0; i < s.frame_stream.frames.size(); ++i)
    io::write_pgm(dir / "frames" / io::frame_name(i), s.frame_stream.height, s.frame_stream.width,
                  s.frame_stream.frames[i]);

  for (const auto& f : s.feature_streams) {
    std::ofstream out(dir / ("features_" + f.modality + ".csv"));
    out << 't';
    for (std::size_t j = 0; j < f.dim; ++j) out << ",f" << j;
    out << '\n';
    for (std::size_t i = 0; i < f.size(); ++i) {
      out << io::format_time(f.timestamps[i]);
      for (double v : f.row(i)) out << ',' << io::format_value(v);
      out << '\n';
    }
  }

  std::ofstream out(dir / "annotations.csv");
  out << 't';
  for (const auto& a : s.annotation_traces) out << ',' << a.annotator_id;
  out << '\n';
  const std::size_t n = s.annotation_traces.empty() ? 0 : s.annotation_traces.front().timestamps.size();
  for (std::size_t i = 0; i < n; ++i) {
    out << io::format_time(s.annotation_traces.front().timestamps[i]);
    for (const auto& a : s.annotation_traces) out << ',' << io::format_value(a.values[i]);
    out << '\n';
  }
}

/// Writes every session into `root/<participant_id>/`. Refuses a non-empty
/// target unless `overwrite` is set, in which case the target is cleared.
inline void write_corpus(const std::vector<Session>& sessions, const fs::path& root, bool overwrite) {
  if (fs::exists(root) && !fs::is_empty(root)) {
    if (!overwrite)
      throw ConfigError("output directory '" + root.string() + "' exists and is not empty (pass --overwrite)");
    fs::remove_all(root);
  }
  fs::create_directories(root);
  for (const auto& s : sessions) write_session(s, root / s.participant_id);
}

/// `dimension` selects `annotations_<dimension>.csv` when present; otherwise
/// `annotations.csv` holds the (single) target.
inline Session read_session(const fs::path& dir, const std::string& dimension = "arousal") {
  const auto meta_path = dir / "meta.json";
  std::ifstream meta_in(meta_path);
  if (!meta_in) throw CorpusFormatError(meta_path.string() + ": missing");
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(meta_in);
  } catch (const nlohmann::json::exception& e) {
    throw CorpusFormatError(meta_path.string() + ": " + e.what());
  }
  Session s;
  try {
    s.participant_id = meta.at("participant_id").get<std::string>();
    s.duration = meta.at("duration").get<double>();
    s.frame_stream.native_fps = meta.at("fps").get<double>();
    s.frame_stream.skip = meta.value("skip", 5);
    const auto range = meta.at("label_range");
    s.label_range = {range.at(0).get<double>(), range.at(1).get<double>()};
  } catch (const nlohmann::json::exception& e) {
    throw CorpusFormatError(meta_path.string() + ": " + e.what());
  }

  std::vector<fs::path> frame_files;
  if (fs::is_directory(dir / "frames"))
    for (const auto& entry : fs::directory_iterator(dir / "frames"))
      if (entry.path().extension() == ".pgm") frame_files.push_back(entry.path());
  if (frame_files.empty()) throw CorpusFormatError((dir / "frames").string() + ": no frames");
  std::sort(frame_files.begin(), frame_files.end());
  for (std::size_t i = 0; i < frame_files.size(); ++i) {
    if (frame_files[i].filename().string() != io::frame_name(i))
      throw CorpusFormatError(frame_files[i].string() + ": expected frame " + io::frame_name(i));
    int h = 0, w = 0;
    auto pixels = io::read_pgm(frame_files[i], h, w);
    if (i == 0) {
      s.frame_stream.height = h;
      s.frame_stream.width = w;
    } else if (h != s.frame_stream.height || w != s.frame_stream.width) {
      throw CorpusFormatError(frame_files[i].string() + ": resolution differs from frame 0");
    }
    s.frame_stream.frames.push_back(std::move(pixels));
  }

  std::map<std::string, std::size_t> declared;
  if (meta.contains("modalities"))
    for (const auto& [name, dim] : meta["modalities"].items()) declared[name] = dim.get<std::size_t>();
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("features_", 0) != 0 || entry.path().extension() != ".csv") continue;
    const auto table = io::read_time_csv(entry.path());
    FeatureStream f;
    f.modality = name.substr(9, name.size() - 9 - 4);
    f.dim = table.header.size() - 1;
    if (auto it = declared.find(f.modality); it != declared.end() && it->second != f.dim)
      throw CorpusFormatError(entry.path().string() + ": " + std::to_string(f.dim) + " feature columns, meta.json declares " +
                              std::to_string(it->second));
    f.timestamps = table.t;
    f.values = table.values;
    for (std::size_t i = 1; i < f.timestamps.size(); ++i)
      if (!(f.timestamps[i] > f.timestamps[i - 1]))
        throw CorpusFormatError(entry.path().string() + ":" + std::to_string(i + 2) + ": timestamps not increasing");
    s.feature_streams.push_back(std::move(f));
  }
  std::sort(s.feature_streams.begin(), s.feature_streams.end(), modality_before);
  for (const auto& [name, dim] : declared) {
    const bool found = std::any_of(s.feature_streams.begin(), s.feature_streams.end(),
                                   [&](const FeatureStream& f) { return f.modality == name; });
    if (!found) throw CorpusFormatError((dir / ("features_" + name + ".csv")).string() + ": declared but missing");
  }

  auto annotations = dir / ("annotations_" + dimension + ".csv");
  if (!fs::exists(annotations)) annotations = dir / "annotations.csv";
  if (!fs::exists(annotations)) throw CorpusFormatError(annotations.string() + ": missing annotations");
  const auto table = io::read_time_csv(annotations);
  if (table.header.size() < 2) throw CorpusFormatError(annotations.string() + ": no annotator columns");
  for (std::size_t i = 1; i < table.t.size(); ++i)
    if (!(table.t[i] > table.t[i - 1]))
      throw CorpusFormatError(annotations.string() + ":" + std::to_string(i + 2) + ": timestamps not increasing");
  const std::size_t annotators = table.header.size() - 1;
  for (std::size_t a = 0; a < annotators; ++a) {
    AnnotationTrace trace;
    trace.annotator_id = table.header[a + 1];
    trace.timestamps = table.t;
    trace.values.resize(table.t.size());
    for (std::size_t i = 0; i < table.t.size(); ++i) {
      const double v = table.values[i * annotators + a];
      if (!s.label_range.contains(v))
        throw CorpusFormatError(annotations.string() + ":" + std::to_string(i + 2) + ": value outside label_range");
      trace.values[i] = v;
    }
    s.annotation_traces.push_back(std::move(trace));
  }
  return s;
}

inline std::vector<fs::path> session_dirs(const fs::path& root) {
  if (!fs::is_directory(root)) throw CorpusFormatError(root.string() + ": not a directory");
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory() && fs::exists(entry.path() / "meta.json")) dirs.push_back(entry.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw CorpusFormatError(root.string() + ": no session directories with meta.json");
  return dirs;
}

inline std::vector<Session> read_corpus(const fs::path& root, const std::string& dimension = "arousal") {
  std::vector<Session> sessions;
  for (const auto& dir : session_dirs(root)) sessions.push_back(read_session(dir, dimension));
  return sessions;
}

/// Reference modality table for the two corpora the pipeline targets.
inline const std::map<std::string, std::map<std::string, std::size_t>>& reference_modalities() {
  static const std::map<std::string, std::map<std::string, std::size_t>> table = {
      {"recola", {{"audio", 131}, {"visual", 41}, {"ecg", 54}, {"eda", 63}}},
      {"sewa", {{"audio", 65}}},
  };
  return table;
}

struct SessionReport {
  std::string directory;
  std::string participant_id;
  bool ok = false;
  std::vector<std::string> problems;
  double duration = 0.0;
  std::size_t frames = 0;
  std::map<std::string, std::size_t> modality_dims;
  std::size_t annotators = 0;
};

struct IngestReport {
  std::vector<SessionReport> sessions;
  [[nodiscard]] bool ok() const {
    return !sessions.empty() && std::all_of(sessions.begin(), sessions.end(), [](const auto& s) { return s.ok; });
  }
};

/// Loads every session, checks stream coverage and dimensions, and collects
/// per-file diagnostics rather than stopping at the first failure.
/// `profile` ("recola" / "sewa") additionally checks dimensions against the
/// reference table; an empty profile checks against meta.json only.
inline IngestReport validate_corpus(const fs::path& root, const std::string& profile = "",
                                    const std::string& dimension = "arousal") {
  IngestReport report;
  std::vector<fs::path> dirs;
  try {
    dirs = session_dirs(root);
  } catch (const CorpusFormatError& e) {
    SessionReport r;
    r.directory = root.string();
    r.problems.push_back(e.what());
    report.sessions.push_back(std::move(r));
    return report;
  }
  std::map<std::string, int> seen_ids;
  for (const auto& dir : dirs) {
    SessionReport r;
    r.directory = dir.string();
    try {
      const auto s = read_session(dir, dimension);
      r.participant_id = s.participant_id;
      r.duration = s.duration;
      r.frames = s.frame_stream.frames.size();
      r.annotators = s.annotation_traces.size();
      const Millis end = to_millis(s.duration);
      const double frame_end = static_cast<double>(r.frames - 1) / s.frame_stream.native_fps;
      if (to_millis(frame_end) < end) r.problems.push_back("frames cover only " + io::format_time(frame_end) + " s");
      for (const auto& f : s.feature_streams) {
        r.modality_dims[f.modality] = f.dim;
        if (f.timestamps.empty() || to_millis(f.timestamps.front()) > 0 || to_millis(f.timestamps.back()) < end)
          r.problems.push_back("features_" + f.modality + ".csv does not cover [0, duration]");
      }
      const auto& grid = s.annotation_traces.front().timestamps;
      if (grid.empty() || to_millis(grid.front()) > 0 || to_millis(grid.back()) < end)
        r.problems.push_back("annotations do not cover [0, duration]");
      if (!profile.empty()) {
        const auto it = reference_modalities().find(profile);
        if (it == reference_modalities().end()) {
          r.problems.push_back("unknown modality profile '" + profile + "'");
        } else {
          for (const auto& [name, dim] : it->second) {
            const auto found = r.modality_dims.find(name);
            if (found == r.modality_dims.end())
              r.problems.push_back("modality '" + name + "' missing for profile " + profile);
            else if (found->second != dim)
              r.problems.push_back("features_" + name + ".csv has " + std::to_string(found->second) +
                                   " columns, profile " + profile + " expects " + std::to_string(dim));
          }
        }
      }
      if (++seen_ids[s.participant_id] > 1) r.problems.push_back("duplicate participant_id " + s.participant_id);
    } catch (const Error& e) {
      r.problems.emplace_back(e.what());
    }
    r.ok = r.problems.empty();
    report.sessions.push_back(std::move(r));
  }
  return report;
}

/// Fingerprint of every file under `root` in sorted path order, ignoring
/// manifest.json.
inline std::uint64_t corpus_hash(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(root))
    if (entry.is_regular_file() && entry.path().filename() != "manifest.json") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  Fnv1a h;
  std::vector<char> buffer;
  for (const auto& file : files) {
    h.update(fs::relative(file, root).generic_string());
    std::ifstream in(file, std::ios::binary);
    buffer.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    h.update(buffer.data(), buffer.size());
  }
  return h.digest();
}

/// Fingerprint of an in-memory corpus (used when sessions never touch disk).
inline std::uint64_t corpus_hash(const std::vector<Session>& sessions) {
  Fnv1a h;
  for (const auto& s : sessions) {
    h.update(s.participant_id).update_value(s.duration);
    for (const auto& frame : s.frame_stream.frames) h.update(frame.data(), frame.size());
    for (const auto& f : s.feature_streams) h.update(f.modality).update_span(std::span<const double>(f.values));
    for (const auto& a : s.annotation_traces) h.update(a.annotator_id).update_span(std::span<const double>(a.values));
  }
  return h.digest();
}

}  // namespace lupi
