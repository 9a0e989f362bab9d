#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "logcan/decoder.hpp"
#include "logcan/metrics.hpp"
#include "logcan/params.hpp"

// Desk-scale optimization: SGD with momentum, poly-decayed learning rate and
// L2 weight decay folded into the gradient, driven by a synthetic rectangle
// dataset that keeps the whole loop seconds-long yet learnable.

namespace logcan {

inline double poly_lr(int iter, int max_iter, double base_lr, double power) {
  if (iter < 0 || iter > max_iter) throw ShapeError("poly_lr: iter out of [0, max_iter]");
  return base_lr * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), power);
}

struct OptimConfig {
  double base_lr = 0.01;
  double weight_decay = 1e-4;
  double momentum = 0.9;
  double power = 0.9;
  int max_iter = 300;
};

template <class S>
struct OptimState {
  OptimConfig cfg;
  std::vector<Tensor<S>> velocity;  // aligned with the parameter store order
  int iter = 0;

  template <class Store>
  static OptimState init(const Store& store, OptimConfig cfg) {
    OptimState st;
    st.cfg = cfg;
    st.velocity.reserve(store.items.size());
    for (const auto& [name, t] : store.items) st.velocity.emplace_back(t.shape);
    return st;
  }
};

// g <- grad + wd * theta;  v <- mu * v + g;  theta <- theta - lr * v.
template <class S>
void sgd_step(ParamStore<S>& params, const std::vector<Tensor<S>>& grads, OptimState<S>& state) {
  if (grads.size() != params.items.size())
    throw ShapeError("sgd_step: gradient count " + std::to_string(grads.size()) +
                     " != parameter count " + std::to_string(params.items.size()));
  const double lr = poly_lr(state.iter, state.cfg.max_iter, state.cfg.base_lr, state.cfg.power);
  for (std::size_t i = 0; i < grads.size(); ++i) {
    Tensor<S>& theta = params.items[i].second;
    const Tensor<S>& g = grads[i];
    Tensor<S>& v = state.velocity[i];
    if (g.shape != theta.shape)
      throw ShapeError("sgd_step: gradient shape " + format_shape(g.shape) +
                       " != parameter shape " + format_shape(theta.shape) + " for " +
                       params.items[i].first);
    for (std::size_t j = 0; j < theta.data.size(); ++j) {
      const double gd = static_cast<double>(g.data[j]) +
                        state.cfg.weight_decay * static_cast<double>(theta.data[j]);
      const double vd = state.cfg.momentum * static_cast<double>(v.data[j]) + gd;
      v.data[j] = static_cast<S>(vd);
      theta.data[j] = static_cast<S>(static_cast<double>(theta.data[j]) - lr * vd);
    }
  }
  ++state.iter;
}

// ---------------------------------------------------------------------------
// Synthetic data: per image, one axis-aligned rectangle per class painted in a
// shuffled order over a rotating background class, so expected per-class pixel
// mass is uniform by symmetry. Images render the label map through a fixed
// color palette plus seeded noise.

struct SynthBatch {
  Tensor<float> images;               // [N,3,H,W]
  std::vector<std::int32_t> labels;   // N*H*W
  index_t n = 0, h = 0, w = 0;
  int classes = 0;
};

inline SynthBatch synth_data(std::uint64_t seed, index_t n, index_t h, index_t w, int classes) {
  if (h % 32 != 0 || w % 32 != 0)
    throw ShapeError("synth_data extents must be divisible by 32, got " + std::to_string(h) + "x" +
                     std::to_string(w));
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  SynthBatch batch;
  batch.n = n;
  batch.h = h;
  batch.w = w;
  batch.classes = classes;
  batch.images = Tensor<float>({n, 3, h, w});
  batch.labels.assign(static_cast<std::size_t>(n * h * w), 0);

  std::uniform_int_distribution<index_t> ypos(0, h - 1), xpos(0, w - 1);
  std::uniform_int_distribution<index_t> ylen(h / 4, (3 * h) / 4), xlen(w / 4, (3 * w) / 4);
  std::normal_distribution<double> noise(0.0, 0.25);

  for (index_t img = 0; img < n; ++img) {
    std::int32_t* lab = batch.labels.data() + img * h * w;
    const std::int32_t background = static_cast<std::int32_t>(img % classes);
    for (index_t i = 0; i < h * w; ++i) lab[i] = background;
    std::vector<std::int32_t> order(static_cast<std::size_t>(classes));
    for (int k = 0; k < classes; ++k) order[static_cast<std::size_t>(k)] = k;
    std::shuffle(order.begin(), order.end(), rng);
    for (std::int32_t cls : order) {
      const index_t y0 = ypos(rng), x0 = xpos(rng);
      const index_t y1 = std::min(h, y0 + ylen(rng)), x1 = std::min(w, x0 + xlen(rng));
      for (index_t y = y0; y < y1; ++y)
        for (index_t x = x0; x < x1; ++x) lab[y * w + x] = cls;
    }
    // palette: distinct corners of the signed RGB cube
    for (index_t y = 0; y < h; ++y)
      for (index_t x = 0; x < w; ++x) {
        const std::int32_t cls = lab[y * w + x];
        for (index_t c = 0; c < 3; ++c) {
          const double base = (cls >> c) & 1 ? 1.0 : -1.0;
          batch.images.data[((img * 3 + c) * h + y) * w + x] =
              static_cast<float>(base + noise(rng));
        }
      }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// The toy overfit loop: full-batch SGD on one synthetic batch.

struct TrainLogRow {
  int step = 0;
  double lr = 0;
  double loss = 0;
};

struct TrainResult {
  std::vector<TrainLogRow> log;
  MetricReport metrics;        // on the training batch, final parameters
  double initial_loss = 0;
  double final_loss = 0;
};

template <class S>
TrainResult train_toy(const ModelConfig& cfg, int steps, ParamStore<S>& params,
                      const SynthBatch& batch, std::ostream* progress = nullptr) {
  auto labels = std::make_shared<const std::vector<std::int32_t>>(batch.labels);
  const Tensor<S> images = batch.images.template cast<S>();
  OptimConfig ocfg;
  ocfg.max_iter = steps;
  OptimState<S> state = OptimState<S>::init(params, ocfg);
  TrainResult result;
  result.log.reserve(static_cast<std::size_t>(steps));

  for (int step = 0; step < steps; ++step) {
    Tape<S> t;
    BoundParams<S> p(t, params);
    PyramidNodes pyramid = toy_backbone_nodes(t, p, t.input(images));
    DecoderNodes<S> dec = decoder_nodes(t, p, cfg, pyramid, /*log_notices=*/step == 0);
    NodeId loss = t.cross_entropy(dec.logits, labels);
    if (cfg.aux_weight > 0) {
      NodeId aux_full = upsample_to_input(t, dec.aux_logits);
      loss = t.add(loss, t.scale(t.cross_entropy(aux_full, labels), cfg.aux_weight));
    }
    const double loss_value = static_cast<double>(t.scalar(loss));
    auto grads = p.collect_grads(t.backward(loss));
    const double lr = poly_lr(state.iter, steps, ocfg.base_lr, ocfg.power);
    sgd_step(params, grads, state);
    result.log.push_back({step, lr, loss_value});
    if (progress && (step % 25 == 0 || step == steps - 1))
      (*progress) << "step " << step << "  lr " << lr << "  loss " << loss_value << "\n";
  }

  result.initial_loss = result.log.front().loss;
  result.final_loss = result.log.back().loss;
  DecoderResult<S> final_out = model_forward(images, cfg, params);
  result.metrics = metrics_compute(argmax_classes(final_out.logits), batch.labels, cfg.classes);
  return result;
}

inline std::string train_log_csv(const TrainResult& r) {
  char line[96];
  std::string out = "step,lr,loss\n";
  for (const TrainLogRow& row : r.log) {
    std::snprintf(line, sizeof line, "%d,%.8f,%.8f\n", row.step, row.lr, row.loss);
    out += line;
  }
  return out;
}

}  // namespace logcan
