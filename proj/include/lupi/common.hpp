///
/// \file common.hpp
/// \brief Shared vocabulary: task kinds, error types, hashing and seed derivation.
///
#pragma once

#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lupi {

enum class Task { classification, regression };

inline std::string_view to_string(Task task) {
  return task == Task::classification ? "classification" : "regression";
}

inline Task parse_task(std::string_view name) {
  if (name == "classification") return Task::classification;
  if (name == "regression") return Task::regression;
  throw std::invalid_argument("unknown task '" + std::string(name) + "'");
}

/// Binary affect class after thresholding. `low` is 0, `high` is 1.
enum class AffectClass : int { low = 0, high = 1 };

// Error hierarchy. Everything derives from lupi::Error so callers can catch
// the library's failures without swallowing unrelated std exceptions.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct EmptyDatasetError : Error {
  using Error::Error;
};
struct WindowRejected : Error {
  using Error::Error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ConfigError : Error {
  using Error::Error;
};
struct TrainingError : Error {
  using Error::Error;
};
struct ModalityAccessError : Error {
  using Error::Error;
};
struct CorpusFormatError : Error {
  using Error::Error;
};

/// 64-bit FNV-1a, used for parameter, split and corpus fingerprints.
class Fnv1a {
 public:
  Fnv1a& update(const void* data, std::size_t size) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
      state_ ^= bytes[i];
      state_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  Fnv1a& update(std::string_view text) { return update(text.data(), text.size()); }
  template <typename T>
  Fnv1a& update_value(const T& value) {
    return update(&value, sizeof(T));
  }
  template <typename T>
  Fnv1a& update_span(std::span<const T> values) {
    return update(values.data(), values.size_bytes());
  }
  [[nodiscard]] std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 0xcbf29ce484222325ULL;
};

inline std::string hex_digest(std::uint64_t value) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[value & 0xF];
    value >>= 4;
  }
  return out;
}

/// SplitMix64 finalizer. Child seeds are mix(parent ^ mix(counter)), so a
/// stream's seed depends only on (master seed, path of counters) and never on
/// the order in which streams are created.
inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t counter) {
  return mix64(parent ^ mix64(counter + 0x632be59bd9b4e019ULL));
}

inline std::uint64_t derive_seed(std::uint64_t parent, std::string_view tag) {
  return derive_seed(parent, Fnv1a{}.update(tag).digest());
}

}  // namespace lupi
