#pragma once

#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "logcan/class_aware.hpp"
#include "logcan/decoder.hpp"
#include "logcan/tape.hpp"

// Central-difference verification of the tape's gradient rules, always in
// 64-bit mode. A probe overwrites one leaf coordinate, replays the tape, and
// compares (f(x+h) - f(x-h)) / 2h with the recorded backward pass.

namespace logcan {

struct GradCheckCase {
  std::string name;
  double max_rel = 0;
  long long coords = 0;
};

struct GradCheckReport {
  double max_rel = 0;
  std::vector<GradCheckCase> cases;

  void merge(GradCheckCase c) {
    max_rel = std::max(max_rel, c.max_rel);
    cases.push_back(std::move(c));
  }
};

inline constexpr double kFdStep = 1e-4;
// Differences this small are finite-difference noise at 64-bit, not gradient
// error; they are treated as exact matches so structurally-zero gradients do
// not divide by ~0.
inline constexpr double kFdNoiseFloor = 1e-9;

inline double fd_rel_error(double analytic, double numeric) {
  const double diff = std::abs(analytic - numeric);
  if (diff <= kFdNoiseFloor) return 0.0;
  return diff / std::max(std::abs(analytic), std::abs(numeric));
}

// Checks d(root)/d(leaf) for the given leaves. coords_per_leaf < 0 checks
// every coordinate.
inline GradCheckCase fd_check(Tape<double>& tape, NodeId root,
                              const std::vector<NodeId>& leaves, const std::string& name,
                              int coords_per_leaf, std::mt19937& rng, double step = kFdStep) {
  GradCheckCase result;
  result.name = name;
  const auto grads = tape.backward(root);
  for (NodeId leaf : leaves) {
    const Tensor<double>& grad = grads[static_cast<std::size_t>(leaf)];
    if (grad.empty())
      throw ShapeError("fd_check: no gradient reached leaf in case " + name);
    const index_t n = tape.leaf_value(leaf).numel();
    std::vector<index_t> coords;
    if (coords_per_leaf < 0 || n <= coords_per_leaf) {
      coords.resize(static_cast<std::size_t>(n));
      for (index_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    } else {
      std::uniform_int_distribution<index_t> pick(0, n - 1);
      for (int i = 0; i < coords_per_leaf; ++i) coords.push_back(pick(rng));
    }
    for (index_t c : coords) {
      double& slot = tape.leaf_value(leaf).data[static_cast<std::size_t>(c)];
      const double saved = slot;
      slot = saved + step;
      tape.replay();
      const double fplus = tape.scalar(root);
      slot = saved - step;
      tape.replay();
      const double fminus = tape.scalar(root);
      slot = saved;
      const double numeric = (fplus - fminus) / (2 * step);
      const double rel = fd_rel_error(grad.data[static_cast<std::size_t>(c)], numeric);
      result.max_rel = std::max(result.max_rel, rel);
      ++result.coords;
    }
  }
  tape.replay();  // restore recorded values
  return result;
}

namespace detail {

inline Tensor<double> random_tensor(std::vector<index_t> shape, std::mt19937& rng, double lo = -1,
                                    double hi = 1) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.data) v = dist(rng);
  return t;
}

// Random values bounded away from zero, for kink-free rectifier probes.
inline Tensor<double> random_offzero(std::vector<index_t> shape, std::mt19937& rng) {
  Tensor<double> t(std::move(shape));
  std::uniform_real_distribution<double> mag(0.2, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (double& v : t.data) v = (sign(rng) ? 1 : -1) * mag(rng);
  return t;
}

// Scalarize via a fixed random weighting so gradients stay generic.
inline NodeId weighted_sum(Tape<double>& t, NodeId x, std::mt19937& rng) {
  auto w = random_tensor(t.value(x).shape, rng);
  return t.sum_all(t.mul(x, t.input(std::move(w))));
}

}  // namespace detail

// One case per primitive backward rule, every coordinate checked.
inline GradCheckReport primitive_gradchecks(std::uint64_t seed) {
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  GradCheckReport report;
  using detail::random_offzero;
  using detail::random_tensor;
  using detail::weighted_sum;

  {
    Tape<double> t;
    NodeId a = t.input(random_tensor({2, 3, 4}, rng), true);
    NodeId b = t.input(random_tensor({2, 4, 5}, rng), true);
    report.merge(fd_check(t, weighted_sum(t, t.matmul(a, b), rng), {a, b}, "matmul_batched", -1, rng));
  }
  {
    Tape<double> t;
    NodeId x = t.input(random_tensor({2, 5, 3}, rng), true);
    NodeId w = t.input(random_tensor({3, 4}, rng), true);
    NodeId b = t.input(random_tensor({4}, rng), true);
    report.merge(fd_check(t, weighted_sum(t, t.linear(x, w, b), rng), {x, w, b}, "linear", -1, rng));
  }
  for (int axis : {0, 1, 2}) {
    Tape<double> t;
    NodeId x = t.input(random_tensor({3, 4, 5}, rng, -2, 2), true);
    report.merge(fd_check(t, weighted_sum(t, t.softmax(x, axis), rng), {x},
                          "softmax(axis=" + std::to_string(axis) + ")", -1, rng));
  }
  for (auto [kernel, stride] : {std::pair{1, 1}, {3, 1}, {3, 2}}) {
    Tape<double> t;
    NodeId x = t.input(random_tensor({2, 3, 4, 4}, rng), true);
    NodeId w = t.input(random_tensor({2, 3, kernel, kernel}, rng), true);
    NodeId b = t.input(random_tensor({2}, rng), true);
    report.merge(fd_check(t, weighted_sum(t, t.conv(x, w, b, stride), rng), {x, w, b},
                          "conv2d(k=" + std::to_string(kernel) + ",s=" + std::to_string(stride) + ")",
                          -1, rng));
  }
  for (int factor : {2, 4}) {
    Tape<double> t;
    NodeId x = t.input(random_tensor({1, 2, 3, 3}, rng), true);
    report.merge(fd_check(t, weighted_sum(t, t.upsample(x, factor), rng), {x},
                          "upsample_bilinear(x" + std::to_string(factor) + ")", -1, rng));
  }
  {
    Tape<double> t;
    NodeId x = t.input(random_tensor({1, 2, 4, 4}, rng), true);
    report.merge(fd_check(t, weighted_sum(t, t.split(x, {2, 2}), rng), {x}, "patch_split", -1, rng));
  }
  {
    Tape<double> t;
    NodeId x = t.input(random_tensor({4, 2, 2, 2}, rng), true);
    report.merge(fd_check(t, weighted_sum(t, t.merge(x, {2, 2}), rng), {x}, "patch_merge", -1, rng));
  }
  {
    Tape<double> t;
    NodeId x = t.input(random_offzero({2, 3, 2, 2}, rng), true);
    report.merge(fd_check(t, weighted_sum(t, t.relu(x), rng), {x}, "relu", -1, rng));
  }
  {
    Tape<double> t;
    NodeId a = t.input(random_tensor({2, 3}, rng), true);
    NodeId b = t.input(random_tensor({2, 3}, rng), true);
    NodeId c = t.input(random_tensor({2, 3}, rng), true);
    report.merge(fd_check(t, weighted_sum(t, t.add_n({a, b, c}), rng), {a, b, c}, "add_n", -1, rng));
  }
  {
    Tape<double> t;
    NodeId a = t.input(random_tensor({3, 4}, rng), true);
    NodeId b = t.input(random_tensor({3, 4}, rng), true);
    report.merge(fd_check(t, weighted_sum(t, t.mul(a, b), rng), {a, b}, "mul", -1, rng));
  }
  {
    Tape<double> t;
    NodeId x = t.input(random_tensor({3, 4}, rng), true);
    report.merge(fd_check(t, weighted_sum(t, t.scale(x, -0.7), rng), {x}, "scale", -1, rng));
  }
  {
    Tape<double> t;
    NodeId a = t.input(random_tensor({2, 2, 3, 3}, rng), true);
    NodeId b = t.input(random_tensor({2, 3, 3, 3}, rng), true);
    report.merge(
        fd_check(t, weighted_sum(t, t.concat_ch(a, b), rng), {a, b}, "concat_channels", -1, rng));
  }
  {
    Tape<double> t;
    NodeId x = t.input(random_tensor({2, 3, 4}, rng), true);
    report.merge(
        fd_check(t, weighted_sum(t, t.transpose_last2(x), rng), {x}, "transpose_last2", -1, rng));
  }
  {
    Tape<double> t;
    NodeId x = t.input(random_tensor({2, 3, 4}, rng), true);
    report.merge(fd_check(t, weighted_sum(t, t.reshape(x, {6, 4}), rng), {x}, "reshape", -1, rng));
  }
  {
    Tape<double> t;
    NodeId x = t.input(random_tensor({2, 3, 2}, rng), true);
    report.merge(
        fd_check(t, weighted_sum(t, t.repeat_batch(x, 3), rng), {x}, "repeat_batch", -1, rng));
  }
  {
    Tape<double> t;
    NodeId x = t.input(random_tensor({3, 2, 2}, rng), true);
    report.merge(fd_check(t, t.sum_all(x), {x}, "sum_all", -1, rng));
  }
  {
    Tape<double> t;
    NodeId x = t.input(random_tensor({1, 4, 3, 3}, rng), true);
    auto labels = std::make_shared<std::vector<std::int32_t>>();
    std::uniform_int_distribution<int> cls(0, 3);
    for (int i = 0; i < 9; ++i) labels->push_back(i == 4 ? kIgnoreIndex : cls(rng));
    report.merge(fd_check(t, t.cross_entropy(x, labels), {x}, "cross_entropy", -1, rng));
  }
  return report;
}

// Full local-module forward plus a classification head and cross-entropy, all
// parameters checked coordinate by coordinate.
inline GradCheckCase lca_gradcheck(std::uint64_t seed) {
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  const int d = 8, k = 3;
  ParamStore<double> params;
  add_pre_classifier_params(params, "lca", d, d, k, rng);
  add_conv_params(params, "head", k, d, 1, rng);

  Tape<double> t;
  BoundParams<double> p(t, params);
  NodeId features = t.input(detail::random_tensor({1, d, 8, 8}, rng), true);
  NodeId class_reps = t.input(detail::random_tensor({1, k, d}, rng), true);
  LcaNodes<double> lca = lca_nodes(t, p, "lca", features, class_reps, Grid{2, 2});
  NodeId logits = t.conv(lca.out, p("head.w"), p("head.b"));
  auto labels = std::make_shared<std::vector<std::int32_t>>();
  std::uniform_int_distribution<int> cls(0, k - 1);
  for (int i = 0; i < 64; ++i) labels->push_back(cls(rng));
  NodeId loss = t.cross_entropy(logits, labels);

  std::vector<NodeId> leaves{features, class_reps};
  for (const auto& [name, id] : p.ids) leaves.push_back(id);
  return fd_check(t, loss, leaves, "lca_end_to_end", -1, rng);
}

// End-to-end decoder on a 1x3x32x32 input at width factor 1/16 with 3 classes,
// a few probe coordinates per parameter tensor.
inline GradCheckCase decoder_gradcheck(std::uint64_t seed, int coords_per_param = 4) {
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  ModelConfig cfg;
  cfg.classes = 3;
  cfg.width_factor = 1.0 / 16.0;
  cfg.d = 8;
  cfg.grids = {Grid{1, 1}, Grid{1, 1}, Grid{1, 1}, Grid{1, 1}};
  cfg.aux_weight = 0.4;
  ParamStore<double> params = init_decoder_params<double>(cfg, rng);

  Tape<double> t;
  BoundParams<double> p(t, params);
  NodeId image = t.input(detail::random_tensor({1, 3, 32, 32}, rng), true);
  PyramidNodes pyramid = toy_backbone_nodes(t, p, image);
  DecoderNodes<double> dec = decoder_nodes(t, p, cfg, pyramid, /*log_notices=*/false);
  auto labels = std::make_shared<std::vector<std::int32_t>>();
  std::uniform_int_distribution<int> cls(0, cfg.classes - 1);
  for (int i = 0; i < 32 * 32; ++i) labels->push_back(cls(rng));
  NodeId loss = t.cross_entropy(dec.logits, labels);
  NodeId aux = t.cross_entropy(upsample_to_input(t, dec.aux_logits), labels);
  loss = t.add(loss, t.scale(aux, cfg.aux_weight));

  std::vector<NodeId> leaves{image};
  for (const auto& [name, id] : p.ids) leaves.push_back(id);
  return fd_check(t, loss, leaves, "decoder_end_to_end", coords_per_param, rng);
}

}  // namespace logcan
