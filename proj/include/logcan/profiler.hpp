#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "logcan/config.hpp"
#include "logcan/decoder.hpp"

// Analytic cost accounting over declarative layer graphs. Counts are pure
// shape arithmetic:
//   conv    macs = k^2 * Cin * Cout * Hout * Wout      params = k^2*Cin*Cout + Cout
//   linear  macs = rows * Cin * Cout                   params = Cin*Cout + Cout
//   matmul  macs = B * M * P * Q
// Non-multiply work (softmax, bilinear taps, rectifiers, sums) is tallied as
// per-element op counts and only enters the 2-flops-per-mac convention;
// the mac convention counts multiply-accumulates alone, matching the common
// profiler practice of reporting conv/matmul MACs as "FLOPs".

namespace logcan {

enum class FlopConvention { kFlops, kMacs };  // flops = 2 * macs + elementwise work

inline const char* to_string(FlopConvention c) {
  return c == FlopConvention::kFlops ? "flops" : "macs";
}

// Per-element op-count constants for non-mac layers under the flops convention.
inline constexpr long long kSoftmaxOpsPerElement = 5;   // max scan, sub, exp, sum scan, div
inline constexpr long long kBilinearOpsPerElement = 8;  // 4 taps: mul+add each
inline constexpr long long kReluOpsPerElement = 1;
inline constexpr long long kAddOpsPerElement = 1;

struct LayerDesc {
  std::string name;
  std::string kind;
  long long weight_params = 0;
  long long bias_params = 0;
  long long macs = 0;
  long long extra_flops = 0;   // non-mac elementwise ops
  long long input_bytes = 0;   // all direct inputs, f32
  long long output_bytes = 0;
};

struct ModuleGraph {
  std::string module;
  std::vector<LayerDesc> layers;
};

inline long long count_params(const ModuleGraph& g) {
  long long n = 0;
  for (const LayerDesc& l : g.layers) n += l.weight_params + l.bias_params;
  return n;
}

inline long long count_flops(const ModuleGraph& g, FlopConvention conv) {
  long long n = 0;
  for (const LayerDesc& l : g.layers)
    n += conv == FlopConvention::kMacs ? l.macs : 2 * l.macs + l.extra_flops;
  return n;
}

// Peak live activation bytes under sequential execution with immediate
// release: at each layer the live set is its direct inputs plus its output.
inline long long estimate_memory(const ModuleGraph& g) {
  long long peak = 0;
  for (const LayerDesc& l : g.layers) peak = std::max(peak, l.input_bytes + l.output_bytes);
  return peak;
}

inline ModuleGraph concat_graphs(const ModuleGraph& a, const ModuleGraph& b) {
  ModuleGraph out;
  out.module = a.module + "+" + b.module;
  out.layers = a.layers;
  out.layers.insert(out.layers.end(), b.layers.begin(), b.layers.end());
  return out;
}

// ---------------------------------------------------------------------------
// Graph builders. Shapes flow [C,H,W] for a batch of one.

namespace detail {

inline long long bytes_of(long long elems) { return 4 * elems; }

struct GraphCursor {
  ModuleGraph* g;

  void conv(const std::string& name, long long cin, long long cout, int k, long long hin,
            long long win, int stride = 1) {
    const long long ho = conv_out_extent(hin, k, stride), wo = conv_out_extent(win, k, stride);
    LayerDesc l;
    l.name = name;
    l.kind = "conv" + std::to_string(k) + "x" + std::to_string(k);
    l.weight_params = static_cast<long long>(k) * k * cin * cout;
    l.bias_params = cout;
    l.macs = static_cast<long long>(k) * k * cin * cout * ho * wo;
    l.input_bytes = bytes_of(cin * hin * win);
    l.output_bytes = bytes_of(cout * ho * wo);
    g->layers.push_back(l);
  }

  void linear(const std::string& name, long long rows, long long cin, long long cout) {
    LayerDesc l;
    l.name = name;
    l.kind = "linear";
    l.weight_params = cin * cout;
    l.bias_params = cout;
    l.macs = rows * cin * cout;
    l.input_bytes = bytes_of(rows * cin);
    l.output_bytes = bytes_of(rows * cout);
    g->layers.push_back(l);
  }

  void matmul(const std::string& name, long long b, long long m, long long p, long long q) {
    LayerDesc l;
    l.name = name;
    l.kind = "matmul";
    l.macs = b * m * p * q;
    l.input_bytes = bytes_of(b * (m * p + p * q));
    l.output_bytes = bytes_of(b * m * q);
    g->layers.push_back(l);
  }

  void elementwise(const std::string& name, const std::string& kind, long long in_elems,
                   long long out_elems, long long ops_per_out) {
    LayerDesc l;
    l.name = name;
    l.kind = kind;
    l.extra_flops = out_elems * ops_per_out;
    l.input_bytes = bytes_of(in_elems);
    l.output_bytes = bytes_of(out_elems);
    g->layers.push_back(l);
  }

  void relu(const std::string& name, long long elems) {
    elementwise(name, "relu", elems, elems, kReluOpsPerElement);
  }
  void softmax(const std::string& name, long long elems) {
    elementwise(name, "softmax", elems, elems, kSoftmaxOpsPerElement);
  }
  void upsample(const std::string& name, long long in_elems, int factor) {
    elementwise(name, "upsample", in_elems, in_elems * factor * factor, kBilinearOpsPerElement);
  }
  void copy(const std::string& name, const std::string& kind, long long elems) {
    elementwise(name, kind, elems, elems, 0);
  }

  // pre-classifier: 1x1 d->d, relu, 1x1 d->k
  void pre_classifier(const std::string& prefix, long long cin, long long hidden, long long k,
                      long long h, long long w) {
    conv(prefix + ".pre1", cin, hidden, 1, h, w);
    relu(prefix + ".pre1.relu", hidden * h * w);
    conv(prefix + ".pre2", hidden, k, 1, h, w);
  }

  // local class-aware core after mapping: scores softmax, local reps, affinity,
  // association, split/merge copies
  void lca_core(const std::string& prefix, long long c, long long k, long long h, long long w,
                Grid grid) {
    const long long patches = static_cast<long long>(grid.nh) * grid.nw;
    const long long ph = h / grid.nh, pw = w / grid.nw, hw = ph * pw;
    copy(prefix + ".split", "patch_split", (c + k) * h * w);
    softmax(prefix + ".local_dist", k * h * w);
    matmul(prefix + ".local_reps", patches, k, hw, c);
    matmul(prefix + ".affinity", patches, hw, c, k);
    softmax(prefix + ".affinity_softmax", k * h * w);
    matmul(prefix + ".associate", patches, hw, k, c);
    copy(prefix + ".merge", "patch_merge", c * h * w);
  }
};

}  // namespace detail

struct LcaGraphSpec {
  long long in_channels = 2048;
  long long h = 128;
  long long w = 128;
  int classes = 6;
  int d = 39;
  Grid grid{4, 4};
};

// The local module as dropped into a network: its 3x3 feature mapping, the
// per-class linear mapping of the incoming global descriptors, its
// pre-classifier, and the core contractions.
inline ModuleGraph build_lca_graph(const LcaGraphSpec& s) {
  ModuleGraph g;
  g.module = "lca";
  detail::GraphCursor cur{&g};
  cur.conv("fmap", s.in_channels, s.d, 3, s.h, s.w);
  cur.relu("fmap.relu", static_cast<long long>(s.d) * s.h * s.w);
  cur.linear("cmap", s.classes, s.in_channels, s.d);
  cur.pre_classifier("lca", s.d, s.d, s.classes, s.h, s.w);
  cur.lca_core("lca", s.d, s.classes, s.h, s.w, s.grid);
  return g;
}

struct GcaGraphSpec {
  long long in_channels = 2048;
  long long h = 128;
  long long w = 128;
  int classes = 6;
  int d = 39;
};

inline ModuleGraph build_gca_graph(const GcaGraphSpec& s) {
  ModuleGraph g;
  g.module = "gca";
  detail::GraphCursor cur{&g};
  cur.pre_classifier("gca", s.in_channels, s.d, s.classes, s.h, s.w);
  cur.softmax("gca.dist", static_cast<long long>(s.classes) * s.h * s.w);
  cur.matmul("gca.reps", 1, s.classes, s.h * s.w, s.in_channels);
  return g;
}

// Mirrors decoder_nodes / init_decoder_params layer for layer; count_params of
// this graph must equal the checkpoint element count exactly.
inline ModuleGraph build_decoder_graph(const ModelConfig& cfg, index_t input_h, index_t input_w) {
  validate(cfg);
  ModuleGraph g;
  g.module = "decoder";
  detail::GraphCursor cur{&g};
  const auto ch = backbone_widths(cfg.width_factor);
  const long long d = cfg.d, k = cfg.classes;

  long long h = input_h, w = input_w;
  cur.conv("backbone.conv0", 3, ch[0], 3, h, w, 2);
  h /= 2;
  w /= 2;
  cur.relu("backbone.conv0.relu", ch[0] * h * w);
  long long prev = ch[0];
  std::array<long long, 4> sh{}, sw{};
  for (int i = 1; i <= 4; ++i) {
    const long long cout = ch[static_cast<std::size_t>(i - 1)];
    cur.conv("backbone.conv" + std::to_string(i), prev, cout, 3, h, w, 2);
    h /= 2;
    w /= 2;
    cur.relu("backbone.conv" + std::to_string(i) + ".relu", cout * h * w);
    sh[static_cast<std::size_t>(i - 1)] = h;
    sw[static_cast<std::size_t>(i - 1)] = w;
    prev = cout;
  }

  cur.pre_classifier("gca", ch[3], d, k, sh[3], sw[3]);
  cur.softmax("gca.dist", k * sh[3] * sw[3]);
  cur.matmul("gca.reps", 1, k, sh[3] * sw[3], ch[3]);

  for (int stage = 4; stage >= 1; --stage) {
    const std::size_t si = static_cast<std::size_t>(stage - 1);
    const std::string prefix = "stage" + std::to_string(stage);
    const long long hs = sh[si], ws = sw[si];
    long long cin = ch[si];
    if (stage != 4) {
      cur.upsample(prefix + ".up_prev", d * hs / 2 * ws / 2, 2);
      cur.copy(prefix + ".concat", "concat", (ch[si] + d) * hs * ws);
      cin = ch[si] + d;
    }
    cur.conv(prefix + ".fmap", cin, d, 3, hs, ws);
    cur.relu(prefix + ".fmap.relu", d * hs * ws);
    cur.linear(prefix + ".cmap", k, ch[3], d);
    cur.pre_classifier(prefix + ".lca", d, d, k, hs, ws);
    const Grid grid = effective_grid(hs, ws, cfg.grids[si], stage, /*log_notice=*/false);
    cur.lca_core(prefix + ".lca", d, k, hs, ws, grid);
  }

  for (int stage = 2; stage <= 4; ++stage) {
    const std::size_t si = static_cast<std::size_t>(stage - 1);
    long long elems = d * sh[si] * sw[si];
    if (stage == 4) {
      cur.upsample("fuse.up_stage4a", elems, 4);
      elems *= 16;
      cur.upsample("fuse.up_stage4b", elems, 2);
    } else {
      cur.upsample("fuse.up_stage" + std::to_string(stage), elems, stage == 2 ? 2 : 4);
    }
  }
  cur.elementwise("fuse.sum", "add", 4 * d * sh[0] * sw[0], d * sh[0] * sw[0],
                  kAddOpsPerElement * 3);
  cur.conv("head", d, k, 1, sh[0], sw[0]);
  cur.upsample("head.upsample", k * sh[0] * sw[0], 4);
  return g;
}

// ---------------------------------------------------------------------------
// Width calibration: sweep the working width, score each candidate by the sum
// of relative deviations from the parameter and flop targets, keep the argmin.

struct CalibrationRow {
  int d = 0;
  long long params = 0;
  long long flops = 0;
  double deviation = 0;
};

struct CalibrationResult {
  int chosen_d = 0;
  CalibrationRow chosen;
  std::vector<CalibrationRow> rows;
};

inline CalibrationResult calibrate_width(double target_params, double target_flops,
                                         const std::vector<int>& sweep, LcaGraphSpec spec,
                                         FlopConvention conv) {
  if (sweep.empty()) throw ShapeError("calibrate_width: empty sweep");
  CalibrationResult result;
  for (int d : sweep) {
    spec.d = d;
    const ModuleGraph g = build_lca_graph(spec);
    CalibrationRow row;
    row.d = d;
    row.params = count_params(g);
    row.flops = count_flops(g, conv);
    row.deviation = std::abs(static_cast<double>(row.params) - target_params) / target_params +
                    std::abs(static_cast<double>(row.flops) - target_flops) / target_flops;
    result.rows.push_back(row);
    if (result.chosen_d == 0 || row.deviation < result.chosen.deviation) {
      result.chosen_d = d;
      result.chosen = row;
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Report formatting.

struct CostReport {
  std::string module;
  long long params = 0;
  long long flops = 0;
  FlopConvention convention = FlopConvention::kFlops;
  long long activation_bytes = 0;
};

inline CostReport cost_report(const ModuleGraph& g, FlopConvention conv) {
  return {g.module, count_params(g), count_flops(g, conv), conv, estimate_memory(g)};
}

inline std::string cost_table(const CostReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "module   params       %s        activation_bytes\n"
                "%-8s %-12lld %-12lld %lld\n"
                "         (%.3f M)    (%.3f G)    (%.1f MB)\n",
                to_string(r.convention), r.module.c_str(), r.params, r.flops, r.activation_bytes,
                static_cast<double>(r.params) / 1e6, static_cast<double>(r.flops) / 1e9,
                static_cast<double>(r.activation_bytes) / (1024.0 * 1024.0));
  return buf;
}

inline std::string cost_csv(const CostReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "module,params,flops,activation_bytes\n%s,%lld,%lld,%lld\n",
                r.module.c_str(), r.params, r.flops, r.activation_bytes);
  return buf;
}

}  // namespace logcan
