#pragma once

#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace logcan {

using index_t = std::int64_t;

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

inline std::string format_shape(const std::vector<index_t>& shape) {
  if (shape.empty()) return "<empty>";
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(shape[i]);
  }
  return s;
}

inline index_t numel_of(const std::vector<index_t>& shape) {
  index_t n = 1;
  for (index_t e : shape) n *= e;
  return n;
}

inline constexpr int kMaxRank = 5;

// Spatial patch grid (rows x cols).
struct Grid {
  int nh = 1;
  int nw = 1;
};

// Dense row-major tensor. Rank 1..5, all extents positive. A default-constructed
// tensor is the empty placeholder (rank 0); every constructed tensor is valid.
template <class S>
struct Tensor {
  std::vector<index_t> shape;
  std::vector<S> data;

  Tensor() = default;

  explicit Tensor(std::vector<index_t> shape_in) : shape(std::move(shape_in)) {
    check_shape(shape);
    data.assign(static_cast<std::size_t>(numel_of(shape)), S(0));
  }

  Tensor(std::vector<index_t> shape_in, std::vector<S> data_in)
      : shape(std::move(shape_in)), data(std::move(data_in)) {
    check_shape(shape);
    if (numel_of(shape) != static_cast<index_t>(data.size()))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + format_shape(shape));
  }

  static Tensor full(std::vector<index_t> shape_in, S v) {
    Tensor t(std::move(shape_in));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  static void check_shape(const std::vector<index_t>& shape) {
    if (shape.empty() || static_cast<int>(shape.size()) > kMaxRank)
      throw ShapeError("tensor rank must be 1..5, got shape " + format_shape(shape));
    for (index_t e : shape)
      if (e <= 0) throw ShapeError("tensor extents must be positive, got shape " + format_shape(shape));
  }

  int rank() const { return static_cast<int>(shape.size()); }
  index_t numel() const { return static_cast<index_t>(data.size()); }
  bool empty() const { return shape.empty(); }

  index_t offset(std::initializer_list<index_t> idx) const {
    index_t off = 0;
    std::size_t i = 0;
    for (index_t v : idx) off = off * shape[i++] + v;
    return off;
  }
  S& at(std::initializer_list<index_t> idx) { return data[static_cast<std::size_t>(offset(idx))]; }
  const S& at(std::initializer_list<index_t> idx) const {
    return data[static_cast<std::size_t>(offset(idx))];
  }

  template <class S2>
  Tensor<S2> cast() const {
    Tensor<S2> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<S2>(data[i]);
    return out;
  }
};

template <class S>
bool same_shape(const Tensor<S>& a, const Tensor<S>& b) {
  return a.shape == b.shape;
}

template <class S>
bool bitwise_equal(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape != b.shape) return false;
  return std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(S)) == 0;
}

template <class S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape != b.shape)
    throw ShapeError("max_abs_diff shape mismatch: " + format_shape(a.shape) + " vs " +
                     format_shape(b.shape));
  double m = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    double d = std::abs(static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]));
    if (d > m) m = d;
  }
  return m;
}

// Worker cap, read once from LOGCAN_THREADS. Defaults to 1: parallel slot writes
// are disjoint so thread count never changes results, but single-thread is the
// reproducibility baseline.
inline int max_threads() {
  static const int n = [] {
    if (const char* s = std::getenv("LOGCAN_THREADS")) {
      int v = std::atoi(s);
      if (v >= 1) return v > 64 ? 64 : v;
    }
    return 1;
  }();
  return n;
}

// fn(i) over [0, n), chunked across threads. Writes of distinct i must not alias.
inline void parallel_for(index_t n, const std::function<void(index_t)>& fn) {
  const index_t nt = std::min<index_t>(max_threads(), n);
  if (nt <= 1) {
    for (index_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> workers;
  workers.reserve(static_cast<std::size_t>(nt));
  const index_t chunk = (n + nt - 1) / nt;
  for (index_t t = 0; t < nt; ++t) {
    const index_t lo = t * chunk;
    const index_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    workers.emplace_back([lo, hi, &fn] {
      for (index_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& w : workers) w.join();
}

}  // namespace logcan
