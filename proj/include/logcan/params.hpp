#pragma once

#include <cmath>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "logcan/io.hpp"
#include "logcan/tape.hpp"
#include "logcan/tensor.hpp"

namespace logcan {

// Named parameter tensors in a fixed creation order. Checkpoints serialize the
// store in this order, which keeps artifacts byte-reproducible.
template <class S>
struct ParamStore {
  NamedTensors<S> items;
  std::unordered_map<std::string, std::size_t> index;

  Tensor<S>& add(const std::string& name, Tensor<S> t) {
    if (index.count(name)) throw ShapeError("duplicate parameter name " + name);
    index.emplace(name, items.size());
    items.emplace_back(name, std::move(t));
    return items.back().second;
  }

  bool has(const std::string& name) const { return index.count(name) != 0; }

  Tensor<S>& get(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw ShapeError("unknown parameter " + name);
    return items[it->second].second;
  }

  const Tensor<S>& get(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw ShapeError("unknown parameter " + name);
    return items[it->second].second;
  }

  index_t total_elements() const {
    index_t n = 0;
    for (const auto& [name, t] : items) n += t.numel();
    return n;
  }

  template <class S2>
  ParamStore<S2> cast() const {
    ParamStore<S2> out;
    for (const auto& [name, t] : items) out.add(name, t.template cast<S2>());
    return out;
  }

  void save(const std::string& path) const { save_checkpoint(items, path); }

  static ParamStore load(const std::string& path) {
    ParamStore out;
    for (auto& [name, t] : load_checkpoint<S>(path)) out.add(name, std::move(t));
    return out;
  }
};

// He-normal fill, fan-in scaled.
template <class S>
void fill_he_normal(Tensor<S>& t, index_t fan_in, std::mt19937& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (S& v : t.data) v = static_cast<S>(dist(rng));
}

template <class S>
void add_conv_params(ParamStore<S>& store, const std::string& name, index_t cout, index_t cin,
                     index_t k, std::mt19937& rng) {
  Tensor<S> w({cout, cin, k, k});
  fill_he_normal(w, cin * k * k, rng);
  store.add(name + ".w", std::move(w));
  store.add(name + ".b", Tensor<S>({cout}));
}

template <class S>
void add_linear_params(ParamStore<S>& store, const std::string& name, index_t cin, index_t cout,
                       std::mt19937& rng) {
  Tensor<S> w({cin, cout});
  fill_he_normal(w, cin, rng);
  store.add(name + ".w", std::move(w));
  store.add(name + ".b", Tensor<S>({cout}));
}

// Lazily registers store parameters as gradient-tracked tape leaves, one node
// per name for the lifetime of the tape.
template <class S>
struct BoundParams {
  Tape<S>* tape;
  ParamStore<S>* store;
  std::unordered_map<std::string, NodeId> ids;

  BoundParams(Tape<S>& t, ParamStore<S>& s) : tape(&t), store(&s) {}

  NodeId operator()(const std::string& name) {
    auto it = ids.find(name);
    if (it != ids.end()) return it->second;
    NodeId id = tape->input(store->get(name), /*requires_grad=*/true);
    ids.emplace(name, id);
    return id;
  }

  // Gradients aligned with the store's creation order, zero tensors where a
  // parameter never joined the tape.
  std::vector<Tensor<S>> collect_grads(const std::vector<Tensor<S>>& node_grads) const {
    std::vector<Tensor<S>> out;
    out.reserve(store->items.size());
    for (const auto& [name, t] : store->items) {
      auto it = ids.find(name);
      if (it != ids.end() && !node_grads[static_cast<std::size_t>(it->second)].empty())
        out.push_back(node_grads[static_cast<std::size_t>(it->second)]);
      else
        out.push_back(Tensor<S>(t.shape));
    }
    return out;
  }
};

}  // namespace logcan
