///
/// \file models.hpp
/// \brief PixelNet / StudentNet, PrivNet and FusionNet, with forward passes
///        that expose the penultimate representation next to the output.
///
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lupi/common.hpp"
#include "lupi/nn/layers.hpp"

namespace lupi {

enum class ModelKind { pixelnet, privnet, fusionnet, studentnet };

inline std::string_view to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::pixelnet: return "pixelnet";
    case ModelKind::privnet: return "privnet";
    case ModelKind::fusionnet: return "fusionnet";
    case ModelKind::studentnet: return "studentnet";
  }
  return "?";
}

inline ModelKind parse_model_kind(std::string_view name) {
  if (name == "pixelnet") return ModelKind::pixelnet;
  if (name == "privnet") return ModelKind::privnet;
  if (name == "fusionnet") return ModelKind::fusionnet;
  if (name == "studentnet" || name == "student") return ModelKind::studentnet;
  throw ConfigError("unknown model kind '" + std::string(name) + "'");
}

inline bool uses_pixels(ModelKind k) { return k != ModelKind::privnet; }
inline bool uses_privileged(ModelKind k) { return k == ModelKind::privnet || k == ModelKind::fusionnet; }

struct ModelSpec {
  ModelKind kind = ModelKind::pixelnet;
  Task task = Task::classification;
  nn::Shape3 pixel_shape{};  // height x width x (5 * window seconds)
  int privileged_dim = 0;
  int penultimate_dim = 96;
  double dropout_rate = 0.10;
  /// Filters of the four convolution blocks. Only tests shrink these.
  std::array<int, 4> conv_filters{32, 48, 64, 96};

  [[nodiscard]] int output_dim() const { return task == Task::classification ? 2 : 1; }

  friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

inline nlohmann::json to_json(const ModelSpec& s) {
  return {{"kind", to_string(s.kind)},
          {"task", to_string(s.task)},
          {"pixel_shape", {s.pixel_shape.height, s.pixel_shape.width, s.pixel_shape.channels}},
          {"privileged_dim", s.privileged_dim},
          {"penultimate_dim", s.penultimate_dim},
          {"dropout_rate", s.dropout_rate},
          {"conv_filters", s.conv_filters}};
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
  ModelSpec s;
  s.kind = parse_model_kind(j.at("kind").get<std::string>());
  s.task = parse_task(j.at("task").get<std::string>());
  const auto& shape = j.at("pixel_shape");
  s.pixel_shape = {shape.at(0).get<int>(), shape.at(1).get<int>(), shape.at(2).get<int>()};
  s.privileged_dim = j.at("privileged_dim").get<int>();
  s.penultimate_dim = j.at("penultimate_dim").get<int>();
  s.dropout_rate = j.at("dropout_rate").get<double>();
  s.conv_filters = j.at("conv_filters").get<std::array<int, 4>>();
  return s;
}

/// Input views for one batch. Either pointer may be null when the model does
/// not consume that modality.
template <typename Scalar>
struct ModelInputs {
  const nn::Mat<Scalar>* pixels = nullptr;
  const nn::Mat<Scalar>* privileged = nullptr;
};

template <typename Scalar>
struct ForwardOutput {
  nn::Mat<Scalar> output;         // 2 x N logits or 1 x N regression values
  nn::Mat<Scalar> penultimate;    // penultimate_dim x N
  nn::Mat<Scalar> probabilities;  // 2 x N softmax (classification only)
};

/// Column-wise softmax, shifted by the column max for stability.
template <typename Derived>
auto softmax_columns(const Eigen::MatrixBase<Derived>& logits) {
  using Scalar = typename Derived::Scalar;
  nn::Mat<Scalar> p = logits;
  for (Eigen::Index j = 0; j < p.cols(); ++j) {
    p.col(j).array() -= p.col(j).maxCoeff();
    p.col(j) = p.col(j).array().exp().matrix();
    p.col(j) /= p.col(j).sum();
  }
  return p;
}

template <typename Scalar>
class Model {
 public:
  Model(ModelSpec spec, std::uint64_t init_seed) : spec_(std::move(spec)), rng_(derive_seed(init_seed, "dropout")) {
    if (spec_.penultimate_dim < 1) throw ConfigError("penultimate_dim must be >= 1");
    const int d = spec_.penultimate_dim;
    int fused = 0;
    if (uses_pixels(spec_.kind)) {
      build_pixel_trunk(spec_.kind == ModelKind::pixelnet || spec_.kind == ModelKind::studentnet);
      fused += d;
    }
    if (uses_privileged(spec_.kind)) {
      if (spec_.privileged_dim < 1)
        throw ConfigError(std::string(to_string(spec_.kind)) + " needs a privileged input dimension >= 1");
      priv_.template add<nn::Dense<Scalar>>("priv.dense", spec_.privileged_dim, d);
      priv_.template add<nn::ReLU<Scalar>>("priv.relu", nn::Shape3{1, 1, d});
      fused += d;
    }
    if (spec_.kind == ModelKind::fusionnet) {
      fusion_.template add<nn::Dense<Scalar>>("fusion.dense", fused, d);
      fusion_.template add<nn::ReLU<Scalar>>("fusion.relu", nn::Shape3{1, 1, d});
    }
    head_ = std::make_unique<nn::Dense<Scalar>>("output", d, spec_.output_dim());

    nn::Rng init(init_seed);
    pixel_.initialize(init);
    priv_.initialize(init);
    fusion_.initialize(init);
    head_->initialize(init);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  [[nodiscard]] const ModelSpec& spec() const { return spec_; }

  ForwardOutput<Scalar> forward(const ModelInputs<Scalar>& in, nn::Mode mode) {
    ForwardOutput<Scalar> out;
    const nn::Mat<Scalar>* pix = nullptr;
    const nn::Mat<Scalar>* prv = nullptr;
    if (uses_pixels(spec_.kind)) {
      if (!in.pixels) throw ShapeError(std::string(to_string(spec_.kind)) + ": pixel input missing");
      if (in.pixels->rows() != spec_.pixel_shape.size())
        throw ShapeError(std::string(to_string(spec_.kind)) + ": pixel input has " + std::to_string(in.pixels->rows()) +
                         " values per sample, expected " + nn::describe(spec_.pixel_shape));
      pix = &pixel_.forward(*in.pixels, mode, rng_);
    }
    if (uses_privileged(spec_.kind)) {
      if (!in.privileged) throw ShapeError(std::string(to_string(spec_.kind)) + ": privileged input missing");
      if (in.privileged->rows() != spec_.privileged_dim)
        throw ConfigError(std::string(to_string(spec_.kind)) + ": privileged input has dimension " +
                          std::to_string(in.privileged->rows()) + ", model expects " +
                          std::to_string(spec_.privileged_dim));
      prv = &priv_.forward(*in.privileged, mode, rng_);
    }
    if (spec_.kind == ModelKind::fusionnet) {
      if (pix->cols() != prv->cols()) throw ShapeError("fusionnet: modality batch sizes differ");
      concat_.resize(pix->rows() + prv->rows(), pix->cols());
      concat_.topRows(pix->rows()) = *pix;
      concat_.bottomRows(prv->rows()) = *prv;
      out.penultimate = fusion_.forward(concat_, mode, rng_);
    } else {
      out.penultimate = pix ? *pix : *prv;
    }
    penultimate_ = out.penultimate;
    head_->forward(penultimate_, out.output, mode, rng_);
    if (spec_.task == Task::classification) out.probabilities = softmax_columns(out.output);
    return out;
  }

  /// Backpropagates after a forward pass. `grad_output` is dL/d(output);
  /// `grad_penultimate`, when given, is an extra dL/d(penultimate) term.
  void backward(const nn::Mat<Scalar>& grad_output, const nn::Mat<Scalar>* grad_penultimate = nullptr) {
    nn::Mat<Scalar> g;
    head_->backward(penultimate_, penultimate_, grad_output, &g);
    if (grad_penultimate) g += *grad_penultimate;
    if (spec_.kind == ModelKind::fusionnet) {
      nn::Mat<Scalar> g_concat;
      fusion_.backward(g, &g_concat);
      const Eigen::Index d = spec_.penultimate_dim;
      nn::Mat<Scalar> g_pix = g_concat.topRows(d);
      nn::Mat<Scalar> g_prv = g_concat.bottomRows(d);
      pixel_.backward(g_pix, nullptr);
      priv_.backward(g_prv, nullptr);
    } else if (uses_pixels(spec_.kind)) {
      pixel_.backward(g, nullptr);
    } else {
      priv_.backward(g, nullptr);
    }
  }

  std::vector<nn::ParamRef<Scalar>> parameters() {
    std::vector<nn::ParamRef<Scalar>> out;
    for (auto* seq : {&pixel_, &priv_, &fusion_})
      for (auto& p : seq->parameters()) out.push_back(p);
    for (auto& p : head_->parameters()) out.push_back(p);
    return out;
  }

  [[nodiscard]] std::size_t parameter_count() {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.size;
    return n;
  }

  [[nodiscard]] std::vector<Scalar> flat_parameters() {
    std::vector<Scalar> flat;
    for (const auto& p : parameters()) flat.insert(flat.end(), p.value, p.value + p.size);
    return flat;
  }

  void set_flat_parameters(std::span<const Scalar> flat) {
    std::size_t offset = 0;
    for (auto& p : parameters()) {
      if (offset + p.size > flat.size()) throw ShapeError("parameter vector too short");
      std::copy_n(flat.data() + offset, p.size, p.value);
      offset += p.size;
    }
    if (offset != flat.size()) throw ShapeError("parameter vector too long");
  }

  [[nodiscard]] std::uint64_t parameter_hash() {
    Fnv1a h;
    for (const auto& p : parameters()) h.update(p.value, p.size * sizeof(Scalar));
    return h.digest();
  }

  void reseed_dropout(std::uint64_t seed) { rng_.seed(seed); }

  [[nodiscard]] const nn::Sequential<Scalar>& pixel_trunk() const { return pixel_; }
  nn::Sequential<Scalar>& fusion_block() { return fusion_; }
  nn::Dense<Scalar>& head() { return *head_; }

 private:
  void build_pixel_trunk(bool with_dropout) {
    const auto& f = spec_.conv_filters;
    const std::array<int, 4> kernels{5, 5, 3, 3};
    const std::array<int, 4> strides{2, 2, 1, 1};
    nn::Shape3 shape = spec_.pixel_shape;
    if (shape.height < kernels[0] || shape.width < kernels[0] || shape.channels < 1)
      throw ShapeError("conv1: input " + nn::describe(shape) + " is smaller than its 5x5 kernel");
    for (int i = 0; i < 4; ++i) {
      const std::string tag = "conv" + std::to_string(i + 1);
      shape = pixel_.template add<nn::Conv2D<Scalar>>(tag, shape, f[static_cast<std::size_t>(i)],
                                                      kernels[static_cast<std::size_t>(i)],
                                                      strides[static_cast<std::size_t>(i)])
                  .output_shape();
      pixel_.template add<nn::ReLU<Scalar>>(tag + ".relu", shape);
      shape = pixel_.template add<nn::MaxPool2x2<Scalar>>("pool" + std::to_string(i + 1), shape).output_shape();
    }
    const int d = spec_.penultimate_dim;
    pixel_.template add<nn::Dense<Scalar>>("pixel.dense", shape.size(), d);
    pixel_.template add<nn::ReLU<Scalar>>("pixel.relu", nn::Shape3{1, 1, d});
    if (with_dropout) pixel_.template add<nn::Dropout<Scalar>>("pixel.dropout", nn::Shape3{1, 1, d}, spec_.dropout_rate);
  }

  ModelSpec spec_;
  nn::Rng rng_;
  nn::Sequential<Scalar> pixel_;
  nn::Sequential<Scalar> priv_;
  nn::Sequential<Scalar> fusion_;
  std::unique_ptr<nn::Dense<Scalar>> head_;
  nn::Mat<Scalar> concat_;
  nn::Mat<Scalar> penultimate_;
};

/// PixelNet and StudentNet share one builder; the kind only labels the role.
template <typename Scalar>
Model<Scalar> build_pixelnet(ModelSpec spec, std::uint64_t seed) {
  if (spec.kind != ModelKind::studentnet) spec.kind = ModelKind::pixelnet;
  return Model<Scalar>(std::move(spec), seed);
}

template <typename Scalar>
Model<Scalar> build_privnet(ModelSpec spec, std::uint64_t seed) {
  spec.kind = ModelKind::privnet;
  return Model<Scalar>(std::move(spec), seed);
}

template <typename Scalar>
Model<Scalar> build_fusionnet(ModelSpec spec, std::uint64_t seed) {
  spec.kind = ModelKind::fusionnet;
  if (spec.privileged_dim < 1 || spec.pixel_shape.size() < 1)
    throw ConfigError("fusionnet needs both pixel and privileged input shapes");
  return Model<Scalar>(std::move(spec), seed);
}

template <typename Scalar>
Model<Scalar> build_model(const ModelSpec& spec, std::uint64_t seed) {
  switch (spec.kind) {
    case ModelKind::privnet: return build_privnet<Scalar>(spec, seed);
    case ModelKind::fusionnet: return build_fusionnet<Scalar>(spec, seed);
    default: return build_pixelnet<Scalar>(spec, seed);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: "LUPICKPT" | u32 version | u32 json length | json (spec + metadata
// hash) | u64 parameter count | parameters as little-endian float64.

inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Scalar>
void save_checkpoint(Model<Scalar>& model, const std::filesystem::path& file, std::uint64_t metadata_hash) {
  nlohmann::json header = {{"spec", to_json(model.spec())}, {"metadata_hash", hex_digest(metadata_hash)}};
  const std::string text = header.dump();
  std::ofstream out(file, std::ios::binary);
  out.write("LUPICKPT", 8);
  const std::uint32_t version = kCheckpointVersion;
  const auto length = static_cast<std::uint32_t>(text.size());
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&length), sizeof length);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto flat = model.flat_parameters();
  const auto count = static_cast<std::uint64_t>(flat.size());
  out.write(reinterpret_cast<const char*>(&count), sizeof count);
  for (Scalar v : flat) {
    const auto d = static_cast<double>(v);
    out.write(reinterpret_cast<const char*>(&d), sizeof d);
  }
  if (!out) throw Error("cannot write checkpoint " + file.string());
}

struct CheckpointHeader {
  ModelSpec spec;
  std::string metadata_hash;
};

/// Loads parameters into `model` after checking the stored spec matches.
template <typename Scalar>
CheckpointHeader load_checkpoint(Model<Scalar>& model, const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  char magic[8] = {};
  in.read(magic, 8);
  if (!in || std::string_view(magic, 8) != "LUPICKPT") throw Error(file.string() + ": not a checkpoint");
  std::uint32_t version = 0, length = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  if (version != kCheckpointVersion)
    throw Error(file.string() + ": unsupported checkpoint version " + std::to_string(version));
  in.read(reinterpret_cast<char*>(&length), sizeof length);
  std::string text(length, '\0');
  in.read(text.data(), length);
  const auto header = nlohmann::json::parse(text);
  CheckpointHeader result{model_spec_from_json(header.at("spec")), header.at("metadata_hash").get<std::string>()};
  if (!(result.spec == model.spec())) throw ConfigError(file.string() + ": checkpoint spec does not match model spec");
  std::uint64_t count = 0;
  in.read(reinterpret_cast<char*>(&count), sizeof count);
  std::vector<Scalar> flat(count);
  for (auto& v : flat) {
    double d = 0.0;
    in.read(reinterpret_cast<char*>(&d), sizeof d);
    v = static_cast<Scalar>(d);
  }
  if (!in) throw Error(file.string() + ": truncated checkpoint");
  model.set_flat_parameters(flat);
  return result;
}

}  // namespace lupi
