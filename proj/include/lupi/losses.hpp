///
/// \file losses.hpp
/// \brief Student objectives: a blend of the supervised task loss and a
///        distance between student and (frozen) teacher representations.
///
///   L = (1 - alpha) * task + alpha * distance(S_l(x), T_k(x_priv))
///
/// Classification defaults to cross-entropy + KL(teacher || student) on the
/// output distributions; regression defaults to squared error + (1 - cos) on
/// the penultimate representations.
///
#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "lupi/common.hpp"
#include "lupi/models.hpp"

namespace lupi {

inline constexpr double kProbabilityFloor = 1e-12;
inline constexpr double kNormFloor = 1e-12;

inline double cross_entropy(std::span<const double> probabilities, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= probabilities.size())
    throw ConfigError("class label out of range");
  return -std::log(std::max(probabilities[static_cast<std::size_t>(label)], kProbabilityFloor));
}

/// sum_i p_i ln(p_i / q_i), both sides floored at 1e-12.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ConfigError("kl_divergence: distributions differ in length");
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    sum += p[i] * (std::log(std::max(p[i], kProbabilityFloor)) - std::log(std::max(q[i], kProbabilityFloor)));
  }
  return std::max(sum, 0.0);
}

/// 1 - cos(u, v); defined as 1 when either norm is below 1e-12.
inline double cosine_distance(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size())
    throw ConfigError("cosine_distance: dimension mismatch (" + std::to_string(u.size()) + " vs " +
                      std::to_string(v.size()) + ")");
  double dot = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  const double nu = std::sqrt(uu), nv = std::sqrt(vv);
  if (nu <= kNormFloor || nv <= kNormFloor) return 1.0;
  return std::clamp(1.0 - dot / (nu * nv), 0.0, 2.0);
}

inline double student_loss_general(double task_loss, double distance, double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must be in [0,1]");
  return (1.0 - alpha) * task_loss + alpha * distance;
}

inline double student_loss_classification(std::span<const double> student_probs, std::span<const double> teacher_probs,
                                          int label, double alpha) {
  return student_loss_general(cross_entropy(student_probs, label), kl_divergence(teacher_probs, student_probs), alpha);
}

inline double student_loss_regression(double student_output, std::span<const double> student_penultimate,
                                      std::span<const double> teacher_penultimate, double target, double alpha) {
  if (student_penultimate.size() != teacher_penultimate.size())
    throw ConfigError("penultimate dimensions differ: student " + std::to_string(student_penultimate.size()) +
                      ", teacher " + std::to_string(teacher_penultimate.size()));
  const double err = student_output - target;
  return student_loss_general(err * err, cosine_distance(student_penultimate, teacher_penultimate), alpha);
}

// ---------------------------------------------------------------------------
// Batched losses with gradients, used by training.

enum class Distance { kl, cosine };
enum class LayerId { output, penultimate };

inline std::string_view to_string(Distance d) { return d == Distance::kl ? "kl" : "cosine"; }
inline std::string_view to_string(LayerId l) { return l == LayerId::output ? "output" : "penultimate"; }

struct LupiLossConfig {
  Task task = Task::classification;
  double alpha = 0.0;
  Distance distance = Distance::kl;
  LayerId student_layer = LayerId::output;
  LayerId teacher_layer = LayerId::output;
  /// Softmax temperature for the KL term; 1 reproduces plain distillation.
  double temperature = 1.0;

  static LupiLossConfig defaults(Task task, double alpha) {
    if (task == Task::classification) return {task, alpha, Distance::kl, LayerId::output, LayerId::output, 1.0};
    return {task, alpha, Distance::cosine, LayerId::penultimate, LayerId::penultimate, 1.0};
  }

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must be in [0,1]");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be > 0");
  }
};

template <typename Scalar>
struct BatchLoss {
  double total = 0.0;     // mean over the batch
  double task = 0.0;      // mean task term
  double distance = 0.0;  // mean distance term
  nn::Mat<Scalar> grad_output;
  nn::Mat<Scalar> grad_penultimate;  // empty when the distance does not touch it
};

namespace detail {

inline std::vector<double> softmax(std::span<const double> z, double temperature) {
  std::vector<double> p(z.size());
  const double m = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) sum += (p[i] = std::exp((z[i] - m) / temperature));
  for (double& v : p) v /= sum;
  return p;
}

/// Given dL/dp for p = softmax(z / T), returns dL/dz.
inline std::vector<double> softmax_backward(std::span<const double> p, std::span<const double> grad_p,
                                            double temperature) {
  double inner = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) inner += grad_p[i] * p[i];
  std::vector<double> g(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) g[i] = p[i] * (grad_p[i] - inner) / temperature;
  return g;
}

/// d(1 - cos(u,v))/du.
inline std::vector<double> cosine_distance_grad(std::span<const double> u, std::span<const double> v) {
  double dot = 0.0, uu = 0.0, vv = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    dot += u[i] * v[i];
    uu += u[i] * u[i];
    vv += v[i] * v[i];
  }
  std::vector<double> g(u.size(), 0.0);
  const double nu = std::sqrt(uu), nv = std::sqrt(vv);
  if (nu <= kNormFloor || nv <= kNormFloor) return g;
  const double c = dot / (nu * nv);
  if (1.0 - c < 0.0 || 1.0 - c > 2.0) return g;  // clamped region
  for (std::size_t i = 0; i < u.size(); ++i) g[i] = -(v[i] / (nu * nv) - c * u[i] / uu);
  return g;
}

template <typename Scalar>
std::vector<double> column(const nn::Mat<Scalar>& m, Eigen::Index j) {
  std::vector<double> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) out[static_cast<std::size_t>(i)] = static_cast<double>(m(i, j));
  return out;
}

}  // namespace detail

/// Targets: class index (0/1) for classification, real value for regression.
/// `teacher` holds the frozen teacher's eval-mode outputs for the same batch
/// (ignored, and may be null, when alpha is 0).
template <typename Scalar>
BatchLoss<Scalar> lupi_loss(const LupiLossConfig& cfg, const ForwardOutput<Scalar>& student,
                            const ForwardOutput<Scalar>* teacher, std::span<const double> targets) {
  cfg.validate();
  const Eigen::Index n = student.output.cols();
  if (static_cast<std::size_t>(n) != targets.size()) throw ShapeError("loss: target count differs from batch size");
  const bool use_teacher = cfg.alpha > 0.0;
  const auto layer = [](const ForwardOutput<Scalar>& f, LayerId id) -> const nn::Mat<Scalar>& {
    return id == LayerId::output ? f.output : f.penultimate;
  };
  if (use_teacher) {
    if (!teacher) throw ConfigError("alpha > 0 requires teacher outputs");
    const auto& s = layer(student, cfg.student_layer);
    const auto& t = layer(*teacher, cfg.teacher_layer);
    if (s.rows() != t.rows())
      throw ConfigError("student " + std::string(to_string(cfg.student_layer)) + " has dimension " +
                        std::to_string(s.rows()) + " but teacher " + std::string(to_string(cfg.teacher_layer)) +
                        " has " + std::to_string(t.rows()));
    if (t.cols() != n) throw ShapeError("loss: teacher batch size differs");
  }

  BatchLoss<Scalar> result;
  result.grad_output.setZero(student.output.rows(), n);
  const bool distance_on_penultimate = use_teacher && cfg.student_layer == LayerId::penultimate;
  if (distance_on_penultimate) result.grad_penultimate.setZero(student.penultimate.rows(), n);
  const double inv_n = 1.0 / static_cast<double>(n);

  for (Eigen::Index j = 0; j < n; ++j) {
    const auto z = detail::column(student.output, j);
    std::vector<double> grad_z(z.size(), 0.0);
    double task = 0.0;
    if (cfg.task == Task::classification) {
      const auto p = detail::softmax(z, 1.0);
      const int label = static_cast<int>(targets[static_cast<std::size_t>(j)]);
      task = cross_entropy(p, label);
      std::vector<double> grad_p(p.size(), 0.0);
      if (p[static_cast<std::size_t>(label)] > kProbabilityFloor)
        grad_p[static_cast<std::size_t>(label)] = -1.0 / p[static_cast<std::size_t>(label)];
      const auto g = detail::softmax_backward(p, grad_p, 1.0);
      for (std::size_t i = 0; i < g.size(); ++i) grad_z[i] += (1.0 - cfg.alpha) * g[i];
    } else {
      const double err = z[0] - targets[static_cast<std::size_t>(j)];
      task = err * err;
      grad_z[0] += (1.0 - cfg.alpha) * 2.0 * err;
    }

    double dist = 0.0;
    std::vector<double> grad_layer;
    if (use_teacher) {
      const auto s = detail::column(layer(student, cfg.student_layer), j);
      const auto t = detail::column(layer(*teacher, cfg.teacher_layer), j);
      if (cfg.distance == Distance::kl) {
        const auto ps = detail::softmax(s, cfg.temperature);
        const auto pt = detail::softmax(t, cfg.temperature);
        dist = kl_divergence(pt, ps);
        std::vector<double> grad_p(ps.size(), 0.0);
        for (std::size_t i = 0; i < ps.size(); ++i)
          if (pt[i] > 0.0 && ps[i] > kProbabilityFloor) grad_p[i] = -pt[i] / ps[i];
        grad_layer = detail::softmax_backward(ps, grad_p, cfg.temperature);
      } else {
        dist = cosine_distance(s, t);
        grad_layer = detail::cosine_distance_grad(s, t);
      }
    }

    result.task += task;
    result.distance += dist;
    result.total += student_loss_general(task, dist, cfg.alpha);

    if (use_teacher && cfg.student_layer == LayerId::output)
      for (std::size_t i = 0; i < grad_z.size(); ++i) grad_z[i] += cfg.alpha * grad_layer[i];
    for (std::size_t i = 0; i < grad_z.size(); ++i)
      result.grad_output(static_cast<Eigen::Index>(i), j) = static_cast<Scalar>(grad_z[i] * inv_n);
    if (distance_on_penultimate)
      for (std::size_t i = 0; i < grad_layer.size(); ++i)
        result.grad_penultimate(static_cast<Eigen::Index>(i), j) =
            static_cast<Scalar>(cfg.alpha * grad_layer[i] * inv_n);
  }
  result.total *= inv_n;
  result.task *= inv_n;
  result.distance *= inv_n;
  return result;
}

}  // namespace lupi
