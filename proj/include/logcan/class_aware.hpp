#pragma once

#include <string>

#include "logcan/params.hpp"
#include "logcan/tape.hpp"

// Class-aware context modeling. The global module (gca) turns the deepest
// feature map into one descriptor per class; the local module (lca) builds
// per-patch class descriptors, scores every pixel against them, and uses the
// scores to mix the global descriptors back into the map.
//
// Normalization placement, pinned for reproducibility:
//   - class-probability maps used as aggregation weights are softmaxed over
//     the spatial extent, per class (within each patch for the local module),
//     so aggregated descriptors are convex combinations of feature vectors;
//   - the pixel/descriptor affinity is softmaxed over the class axis, per
//     pixel, so the output is a convex mixture of global descriptors.
// No temperature scaling is applied before either softmax.

namespace logcan {

enum class NormAxis { kClass, kSpatial };

template <class S>
struct ClassDistribution {
  Tensor<S> logits;  // [N,K,H,W], retained for auxiliary supervision
  Tensor<S> probs;   // [N,K,H,W], normalized along `axis`
  NormAxis axis = NormAxis::kClass;
};

template <class S>
struct GlobalClassReps {
  Tensor<S> reps;  // [N,K,C']
};

// Pre-classifier: two 1x1 convolutions with a rectifier between, hidden width
// equal to the module working width. Registers <prefix>.pre1 / <prefix>.pre2.
template <class S>
NodeId pre_classifier_logits(Tape<S>& t, BoundParams<S>& p, const std::string& prefix,
                             NodeId features) {
  NodeId hidden = t.relu(t.conv(features, p(prefix + ".pre1.w"), p(prefix + ".pre1.b")));
  return t.conv(hidden, p(prefix + ".pre2.w"), p(prefix + ".pre2.b"));
}

template <class S>
void add_pre_classifier_params(ParamStore<S>& store, const std::string& prefix, index_t cin,
                               index_t hidden, index_t classes, std::mt19937& rng) {
  add_conv_params(store, prefix + ".pre1", hidden, cin, 1, rng);
  add_conv_params(store, prefix + ".pre2", classes, hidden, 1, rng);
}

template <class S>
struct GcaNodes {
  NodeId logits;  // [N,K,H',W']
  NodeId dist;    // [N,K,H'*W'], spatially normalized per class
  NodeId reps;    // [N,K,C']
};

// Global class representations: reps[n,k,:] = sum_p dist[n,k,p] * r_g[n,:,p].
template <class S>
GcaNodes<S> gca_nodes(Tape<S>& t, BoundParams<S>& p, const std::string& prefix, NodeId r_g) {
  const auto& shape = t.value(r_g).shape;
  const index_t n = shape[0], c = shape[1], pixels = shape[2] * shape[3];
  GcaNodes<S> out;
  out.logits = pre_classifier_logits(t, p, prefix, r_g);
  const index_t k = t.value(out.logits).shape[1];
  out.dist = t.softmax(t.reshape(out.logits, {n, k, pixels}), 2);
  NodeId features = t.transpose_last2(t.reshape(r_g, {n, c, pixels}));  // [N,P,C']
  out.reps = t.matmul(out.dist, features);
  return out;
}

template <class S>
struct LcaNodes {
  NodeId dist_logits;  // [N,K,H,W] pre-classification scores
  NodeId local_dist;   // [B,K,h*w], softmaxed within each patch
  NodeId local_reps;   // [B,K,C]
  NodeId affinity;     // [B,h*w,K], softmaxed over classes per pixel
  NodeId out;          // [N,C,H,W]
};

namespace detail {

// Shared tail of the local module: from per-patch features [B,C,h,w] and
// per-patch class scores [B,K,h,w] to the augmented per-patch maps [B,C,h,w].
template <class S>
LcaNodes<S> lca_core(Tape<S>& t, NodeId patch_feats, NodeId patch_scores, NodeId class_reps) {
  const auto& fs = t.value(patch_feats).shape;
  const index_t b = fs[0], c = fs[1], ph = fs[2], pw = fs[3];
  const index_t k = t.value(patch_scores).shape[1];
  LcaNodes<S> out;
  out.local_dist = t.softmax(t.reshape(patch_scores, {b, k, ph * pw}), 2);
  NodeId feats = t.transpose_last2(t.reshape(patch_feats, {b, c, ph * pw}));  // [B,hw,C]
  out.local_reps = t.matmul(out.local_dist, feats);                           // [B,K,C]
  out.affinity = t.softmax(t.matmul(feats, t.transpose_last2(out.local_reps)), 2);
  NodeId mixed = t.matmul(out.affinity, class_reps);  // [B,hw,C]
  out.out = t.reshape(t.transpose_last2(mixed), {b, c, ph, pw});
  return out;
}

}  // namespace detail

// Local class-aware refinement. features [N,C,H,W] (C = working width), global
// class_reps [N,K,C]; output [N,C,H,W]. H and W must be divisible by the grid.
template <class S>
LcaNodes<S> lca_nodes(Tape<S>& t, BoundParams<S>& p, const std::string& prefix, NodeId features,
                      NodeId class_reps, Grid grid) {
  const auto& shape = t.value(features).shape;
  if (t.value(class_reps).shape[2] != shape[1])
    throw ShapeError("lca channel mismatch: features " + format_shape(shape) +
                     " vs class reps " + format_shape(t.value(class_reps).shape));
  LcaNodes<S> out;
  out.dist_logits = pre_classifier_logits(t, p, prefix, features);
  NodeId patch_feats = t.split(features, grid);
  NodeId patch_scores = t.split(out.dist_logits, grid);
  NodeId reps = grid.nh * grid.nw > 1 ? t.repeat_batch(class_reps, grid.nh * grid.nw) : class_reps;
  LcaNodes<S> core = detail::lca_core(t, patch_feats, patch_scores, reps);
  out.local_dist = core.local_dist;
  out.local_reps = core.local_reps;
  out.affinity = core.affinity;
  out.out = t.merge(core.out, grid);
  return out;
}

// Single-patch reference path: identical computation over the whole map,
// without the split/merge machinery.
template <class S>
LcaNodes<S> lca_global_nodes(Tape<S>& t, BoundParams<S>& p, const std::string& prefix,
                             NodeId features, NodeId class_reps) {
  const auto& shape = t.value(features).shape;
  if (t.value(class_reps).shape[2] != shape[1])
    throw ShapeError("lca channel mismatch: features " + format_shape(shape) +
                     " vs class reps " + format_shape(t.value(class_reps).shape));
  LcaNodes<S> out;
  out.dist_logits = pre_classifier_logits(t, p, prefix, features);
  LcaNodes<S> core = detail::lca_core(t, features, out.dist_logits, class_reps);
  out.local_dist = core.local_dist;
  out.local_reps = core.local_reps;
  out.affinity = core.affinity;
  out.out = core.out;
  return out;
}

// ---------------------------------------------------------------------------
// Value-level entry points (run a private tape, return plain tensors).

template <class S>
ClassDistribution<S> pre_classify(const Tensor<S>& features, ParamStore<S>& params,
                                  const std::string& prefix, NormAxis axis = NormAxis::kClass) {
  Tape<S> t;
  BoundParams<S> p(t, params);
  NodeId logits = pre_classifier_logits(t, p, prefix, t.input(features));
  ClassDistribution<S> out;
  out.logits = t.value(logits);
  out.axis = axis;
  if (axis == NormAxis::kClass) {
    out.probs = softmax(out.logits, 1);
  } else {
    const auto& s = out.logits.shape;
    out.probs = reshape(softmax(reshape(out.logits, {s[0], s[1], s[2] * s[3]}), 2), s);
  }
  return out;
}

template <class S>
struct GcaResult {
  ClassDistribution<S> dist;
  GlobalClassReps<S> reps;
};

template <class S>
GcaResult<S> gca_forward(const Tensor<S>& r_g, ParamStore<S>& params, const std::string& prefix) {
  Tape<S> t;
  BoundParams<S> p(t, params);
  GcaNodes<S> nodes = gca_nodes(t, p, prefix, t.input(r_g));
  GcaResult<S> out;
  out.dist.logits = t.value(nodes.logits);
  out.dist.probs = reshape(t.value(nodes.dist), out.dist.logits.shape);
  out.dist.axis = NormAxis::kSpatial;
  out.reps.reps = t.value(nodes.reps);
  return out;
}

template <class S>
Tensor<S> lca_forward(const Tensor<S>& features, const Tensor<S>& class_reps,
                      ParamStore<S>& params, const std::string& prefix, Grid grid) {
  Tape<S> t;
  BoundParams<S> p(t, params);
  return t.value(lca_nodes(t, p, prefix, t.input(features), t.input(class_reps), grid).out);
}

template <class S>
Tensor<S> lca_global_variant(const Tensor<S>& features, const Tensor<S>& class_reps,
                             ParamStore<S>& params, const std::string& prefix) {
  Tape<S> t;
  BoundParams<S> p(t, params);
  return t.value(lca_global_nodes(t, p, prefix, t.input(features), t.input(class_reps)).out);
}

}  // namespace logcan
