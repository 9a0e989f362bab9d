#pragma once

#include <array>
#include <cmath>
#include <iostream>
#include <string>

#include "logcan/class_aware.hpp"
#include "logcan/config.hpp"
#include "logcan/params.hpp"

// The full decoder graph: a toy backbone emits a four-stage feature pyramid at
// strides 4/8/16/32; the global module runs on the deepest stage; each stage
// is mapped to the working width and refined by a local module, deepest first,
// with the refined map upsampled 2x and concatenated into the next shallower
// stage; the four refined maps are upsampled to stride 4, summed, projected to
// class logits and quadruply upsampled to the input extents.

namespace logcan {

inline std::array<index_t, 4> backbone_widths(double width_factor) {
  constexpr std::array<index_t, 4> base{256, 512, 1024, 2048};
  std::array<index_t, 4> out{};
  for (std::size_t i = 0; i < 4; ++i)
    out[i] = std::max<index_t>(1, std::llround(static_cast<double>(base[i]) * width_factor));
  return out;
}

template <class S>
struct FeaturePyramid {
  std::array<Tensor<S>, 4> stages;  // strides 4, 8, 16, 32
};

struct PyramidNodes {
  std::array<NodeId, 4> stages;
};

// Stages whose extents cannot host the configured grid fall back to a single
// patch; non-divisible extents above the grid size are an error.
inline Grid effective_grid(index_t h, index_t w, Grid g, int stage, bool log_notice = true) {
  if (h < g.nh || w < g.nw) {
    if (log_notice)
      std::cerr << "notice: stage " << stage << " extents " << h << "x" << w
                << " smaller than grid " << format_grid(g) << ", using 1x1\n";
    return Grid{1, 1};
  }
  return g;
}

template <class S>
void init_backbone_params(ParamStore<S>& store, double width_factor, std::mt19937& rng) {
  const auto ch = backbone_widths(width_factor);
  add_conv_params(store, "backbone.conv0", ch[0], 3, 3, rng);
  add_conv_params(store, "backbone.conv1", ch[0], ch[0], 3, rng);
  add_conv_params(store, "backbone.conv2", ch[1], ch[0], 3, rng);
  add_conv_params(store, "backbone.conv3", ch[2], ch[1], 3, rng);
  add_conv_params(store, "backbone.conv4", ch[3], ch[2], 3, rng);
}

// Stride-2 3x3 convolutions with rectifiers; stage 1 uses two of them so the
// pyramid starts at stride 4.
template <class S>
PyramidNodes toy_backbone_nodes(Tape<S>& t, BoundParams<S>& p, NodeId image) {
  const auto& shape = t.value(image).shape;
  if (shape[2] % 32 != 0 || shape[3] % 32 != 0)
    throw ShapeError("backbone input extents must be divisible by 32, got " +
                     format_shape(shape));
  PyramidNodes out{};
  NodeId x = t.relu(t.conv(image, p("backbone.conv0.w"), p("backbone.conv0.b"), 2));
  out.stages[0] = t.relu(t.conv(x, p("backbone.conv1.w"), p("backbone.conv1.b"), 2));
  out.stages[1] = t.relu(t.conv(out.stages[0], p("backbone.conv2.w"), p("backbone.conv2.b"), 2));
  out.stages[2] = t.relu(t.conv(out.stages[1], p("backbone.conv3.w"), p("backbone.conv3.b"), 2));
  out.stages[3] = t.relu(t.conv(out.stages[2], p("backbone.conv4.w"), p("backbone.conv4.b"), 2));
  return out;
}

template <class S>
FeaturePyramid<S> toy_backbone_forward(const Tensor<S>& image, ParamStore<S>& params) {
  Tape<S> t;
  BoundParams<S> p(t, params);
  PyramidNodes nodes = toy_backbone_nodes(t, p, t.input(image));
  FeaturePyramid<S> out;
  for (int i = 0; i < 4; ++i) out.stages[static_cast<std::size_t>(i)] = t.value(nodes.stages[static_cast<std::size_t>(i)]);
  return out;
}

// 3x3 mapping of stage features to the working width, with a rectifier.
template <class S>
NodeId feature_map(Tape<S>& t, BoundParams<S>& p, const std::string& prefix, NodeId x) {
  return t.relu(t.conv(x, p(prefix + ".fmap.w"), p(prefix + ".fmap.b")));
}

// Per-class linear mapping of global descriptors to the working width.
template <class S>
NodeId class_map(Tape<S>& t, BoundParams<S>& p, const std::string& prefix, NodeId reps) {
  return t.linear(reps, p(prefix + ".cmap.w"), p(prefix + ".cmap.b"));
}

template <class S>
ParamStore<S> init_decoder_params(const ModelConfig& cfg, std::mt19937& rng) {
  validate(cfg);
  const auto ch = backbone_widths(cfg.width_factor);
  const index_t d = cfg.d, k = cfg.classes;
  ParamStore<S> store;
  init_backbone_params(store, cfg.width_factor, rng);
  add_pre_classifier_params(store, "gca", ch[3], d, k, rng);
  for (int stage = 4; stage >= 1; --stage) {
    const std::string prefix = "stage" + std::to_string(stage);
    const index_t cin = stage == 4 ? ch[3] : ch[static_cast<std::size_t>(stage - 1)] + d;
    add_conv_params(store, prefix + ".fmap", d, cin, 3, rng);
    add_linear_params(store, prefix + ".cmap", ch[3], d, rng);
    add_pre_classifier_params(store, prefix + ".lca", d, d, k, rng);
  }
  add_conv_params(store, "head", k, d, 1, rng);
  return store;
}

template <class S>
struct DecoderNodes {
  NodeId logits;                    // [N,K,H,W] at the input extents
  NodeId aux_logits;                // [N,K,H/32,W/32] global pre-classification scores
  GcaNodes<S> gca;
  std::array<NodeId, 4> refined;    // per-stage local-module outputs
  std::array<NodeId, 4> upsampled;  // the same maps at stride 4
  NodeId fused;                     // elementwise sum of the four maps
};

template <class S>
DecoderNodes<S> decoder_nodes(Tape<S>& t, BoundParams<S>& p, const ModelConfig& cfg,
                              const PyramidNodes& pyramid, bool log_notices = true) {
  validate(cfg);
  DecoderNodes<S> out{};
  out.gca = gca_nodes(t, p, "gca", pyramid.stages[3]);
  out.aux_logits = out.gca.logits;

  NodeId prev = -1;  // previous (deeper) refined map
  for (int stage = 4; stage >= 1; --stage) {
    const std::size_t si = static_cast<std::size_t>(stage - 1);
    const std::string prefix = "stage" + std::to_string(stage);
    NodeId stage_in = pyramid.stages[si];
    if (stage != 4) stage_in = t.concat_ch(stage_in, t.upsample(prev, 2));
    NodeId mapped;
    try {
      mapped = feature_map(t, p, prefix, stage_in);
    } catch (const ShapeError& e) {
      throw ShapeError("stage " + std::to_string(stage) + ": " + e.what());
    }
    NodeId reps = class_map(t, p, prefix, out.gca.reps);
    const auto& ms = t.value(mapped).shape;
    const Grid grid = effective_grid(ms[2], ms[3], cfg.grids[si], stage, log_notices);
    if (ms[2] % grid.nh != 0 || ms[3] % grid.nw != 0)
      throw ShapeError("stage " + std::to_string(stage) + ": extents " + std::to_string(ms[2]) +
                       "x" + std::to_string(ms[3]) + " not divisible by grid " +
                       format_grid(grid));
    out.refined[si] = lca_nodes(t, p, prefix, mapped, reps, grid).out;
    prev = out.refined[si];
  }

  // Bring every refined map to stride 4 (stage 1's native stride) and sum.
  out.upsampled[0] = out.refined[0];
  out.upsampled[1] = t.upsample(out.refined[1], 2);
  out.upsampled[2] = t.upsample(out.refined[2], 4);
  out.upsampled[3] = t.upsample(t.upsample(out.refined[3], 4), 2);
  out.fused = t.add_n({out.upsampled[0], out.upsampled[1], out.upsampled[2], out.upsampled[3]});
  NodeId head = t.conv(out.fused, p("head.w"), p("head.b"));
  out.logits = t.upsample(head, 4);
  return out;
}

// Chain of 4x/2x bilinear steps lifting stride-32 maps to the input extents
// (used for auxiliary supervision).
template <class S>
NodeId upsample_to_input(Tape<S>& t, NodeId stride32_map) {
  return t.upsample(t.upsample(t.upsample(stride32_map, 4), 4), 2);
}

template <class S>
struct DecoderResult {
  Tensor<S> logits;
  Tensor<S> aux_logits;
};

template <class S>
DecoderResult<S> decoder_forward(const FeaturePyramid<S>& pyramid, const ModelConfig& cfg,
                                 ParamStore<S>& params) {
  Tape<S> t;
  BoundParams<S> p(t, params);
  PyramidNodes nodes{};
  for (int i = 0; i < 4; ++i)
    nodes.stages[static_cast<std::size_t>(i)] = t.input(pyramid.stages[static_cast<std::size_t>(i)]);
  DecoderNodes<S> dec = decoder_nodes(t, p, cfg, nodes);
  return {t.value(dec.logits), t.value(dec.aux_logits)};
}

template <class S>
DecoderResult<S> model_forward(const Tensor<S>& image, const ModelConfig& cfg,
                               ParamStore<S>& params) {
  Tape<S> t;
  BoundParams<S> p(t, params);
  PyramidNodes pyramid = toy_backbone_nodes(t, p, t.input(image));
  DecoderNodes<S> dec = decoder_nodes(t, p, cfg, pyramid);
  return {t.value(dec.logits), t.value(dec.aux_logits)};
}

}  // namespace logcan
