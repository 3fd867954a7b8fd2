#pragma once

#include <algorithm>
#include <array>
#include <cassert>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "kdseg/error.hpp"
#include "kdseg/log.hpp"

namespace kdseg {

// Dense row-major extents, at most 4 dims. Feature maps are B,H,W,C.
class Shape {
 public:
  Shape() = default;

  Shape(std::initializer_list<int> dims) {
    if (dims.size() > 4) throw ShapeError("rank > 4 not supported");
    for (int d : dims) {
      if (d <= 0) throw ShapeError("non-positive extent " + std::to_string(d));
      d_[static_cast<std::size_t>(nd_++)] = d;
    }
  }

  int ndim() const { return nd_; }

  int operator[](int i) const {
    assert(i >= 0 && i < nd_);
    return d_[static_cast<std::size_t>(i)];
  }

  std::size_t numel() const {
    std::size_t n = 1;
    for (int i = 0; i < nd_; ++i) n *= static_cast<std::size_t>(d_[static_cast<std::size_t>(i)]);
    return n;
  }

  bool operator==(const Shape& o) const {
    if (nd_ != o.nd_) return false;
    for (int i = 0; i < nd_; ++i)
      if (d_[static_cast<std::size_t>(i)] != o.d_[static_cast<std::size_t>(i)]) return false;
    return true;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::string s = "[";
    for (int i = 0; i < nd_; ++i) {
      if (i) s += ",";
      s += std::to_string(d_[static_cast<std::size_t>(i)]);
    }
    return s + "]";
  }

 private:
  std::array<int, 4> d_{1, 1, 1, 1};
  int nd_ = 0;
};

template <class T>
class TapeT;

// Value-semantic handle onto shared dense storage. Copies alias; use clone()
// for a deep copy. Data is immutable once an op has consumed it; only the
// optimizer mutates parameter tensors, between tape lifetimes.
template <class T>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    TensorT t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = shape;
    t.s_->data.assign(shape.numel(), T(0));
    t.set_requires_grad(requires_grad);
    return t;
  }

  static TensorT full(Shape shape, T value, bool requires_grad = false) {
    TensorT t = zeros(shape, requires_grad);
    std::fill(t.s_->data.begin(), t.s_->data.end(), value);
    return t;
  }

  static TensorT from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (data.size() != shape.numel())
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape.str());
    TensorT t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = shape;
    t.s_->data = std::move(data);
    t.set_requires_grad(requires_grad);
    return t;
  }

  static TensorT scalar(T value) { return from_data(Shape{}, {value}); }

  bool defined() const { return s_ != nullptr; }
  const Shape& shape() const { return s_->shape; }
  std::size_t numel() const { return s_->data.size(); }

  // Handles have pointer semantics: a const handle still exposes mutable
  // storage, like shared_ptr. Backward closures rely on this.
  std::span<T> data() const { return {s_->data.data(), s_->data.size()}; }

  // Zero-filled unless a backward pass wrote to it. Empty span when the
  // tensor never required grad.
  std::span<T> grad() const { return {s_->grad.data(), s_->grad.size()}; }

  bool requires_grad() const { return s_->requires_grad; }

  void set_requires_grad(bool rg) {
    s_->requires_grad = rg;
    if (rg && s_->grad.size() != s_->data.size()) s_->grad.assign(s_->data.size(), T(0));
    if (!rg) std::fill(s_->grad.begin(), s_->grad.end(), T(0));
  }

  void zero_grad() { std::fill(s_->grad.begin(), s_->grad.end(), T(0)); }

  T item() const {
    if (numel() != 1) throw ParamError("item() on tensor of shape " + shape().str());
    return s_->data[0];
  }

  T at(std::initializer_list<int> idx) const {
    const Shape& sh = s_->shape;
    if (static_cast<int>(idx.size()) != sh.ndim()) throw ShapeError("index rank mismatch");
    std::size_t off = 0;
    int i = 0;
    for (int v : idx) {
      assert(v >= 0 && v < sh[i]);
      off = off * static_cast<std::size_t>(sh[i]) + static_cast<std::size_t>(v);
      ++i;
    }
    return s_->data[off];
  }

  TensorT clone() const {
    TensorT t;
    t.s_ = std::make_shared<Storage>();
    t.s_->shape = s_->shape;
    t.s_->data = s_->data;
    t.set_requires_grad(s_->requires_grad);
    return t;
  }

  bool same_storage(const TensorT& o) const { return s_ == o.s_; }

  // Set by the op that produced this tensor; backward() uses it to locate the
  // loss on its tape. Leaves and no-grad results carry none.
  void attach_node(const void* tape, std::size_t node) {
    s_->tape = tape;
    s_->node = node;
  }
  const void* tape_of() const { return s_->tape; }
  std::size_t node_index() const { return s_->node; }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // sized like data iff requires_grad was ever set
    bool requires_grad = false;
    const void* tape = nullptr;
    std::size_t node = static_cast<std::size_t>(-1);
  };

  std::shared_ptr<Storage> s_;

  friend class TapeT<T>;
};

// Ordered record of primitive applications. Ops push their backward closure
// in creation order, which is topological by construction; backward() replays
// the suffix ending at the loss node in reverse, visiting each node once.
template <class T>
class TapeT {
 public:
  using BackwardFn = std::function<void()>;

  // Returns this node's index on the tape.
  std::size_t record(BackwardFn fn) {
    nodes_.push_back(std::move(fn));
    return nodes_.size() - 1;
  }

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  std::size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

  void run_backward_from(std::size_t node) {
    for (std::size_t i = node + 1; i-- > 0;) nodes_[i]();
  }

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

 private:
  std::vector<BackwardFn> nodes_;
  bool recording_ = true;
};

template <class T>
class NoGradScope {
 public:
  explicit NoGradScope(TapeT<T>& tape) : tape_(tape), prev_(tape.recording()) {
    tape_.set_recording(false);
  }
  ~NoGradScope() { tape_.set_recording(prev_); }

  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  TapeT<T>& tape_;
  bool prev_;
};

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

namespace detail {

template <class T>
void check_finite(const TensorT<T>& t, const char* op) {
#ifndef NDEBUG
  for (T v : t.data())
    if (!std::isfinite(static_cast<double>(v)))
      throw Error(std::string(op) + " produced a non-finite value");
#else
  (void)t;
  (void)op;
#endif
}

template <class T>
void require_same_shape(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": " + a.shape().str() + " vs " + b.shape().str());
}

template <class T, class F>
void record_node(TapeT<T>& tape, TensorT<T>& out, F&& fn) {
  out.attach_node(&tape, tape.record(std::forward<F>(fn)));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> add(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_same_shape(a, b, "add");
  bool rg = tape.recording() && (a.requires_grad() || b.requires_grad());
  TensorT<T> out = TensorT<T>::zeros(a.shape(), rg);
  auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  detail::check_finite(out, "add");
  if (rg) {
    detail::record_node(tape, out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> mul(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_same_shape(a, b, "mul");
  bool rg = tape.recording() && (a.requires_grad() || b.requires_grad());
  TensorT<T> out = TensorT<T>::zeros(a.shape(), rg);
  auto av = a.data(), bv = b.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  detail::check_finite(out, "mul");
  if (rg) {
    detail::record_node(tape, out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        auto bv2 = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        auto av2 = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> scale(TapeT<T>& tape, const TensorT<T>& a, T c) {
  bool rg = tape.recording() && a.requires_grad();
  TensorT<T> out = TensorT<T>::zeros(a.shape(), rg);
  auto av = a.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
  detail::check_finite(out, "scale");
  if (rg) {
    detail::record_node(tape, out, [a, out, c]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
  }
  return out;
}

template <class T>
TensorT<T> relu(TapeT<T>& tape, const TensorT<T>& x) {
  bool rg = tape.recording() && x.requires_grad();
  TensorT<T> out = TensorT<T>::zeros(x.shape(), rg);
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  if (rg) {
    detail::record_node(tape, out, [x, out]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      auto xv2 = x.data();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xv2[i] > T(0)) gx[i] += g[i];
    });
  }
  return out;
}

inline constexpr double kLogClamp = 1e-12;

// log with input clamped at 1e-12 so cross-entropy terms never hit -inf.
template <class T>
TensorT<T> log_guarded(TapeT<T>& tape, const TensorT<T>& x) {
  bool rg = tape.recording() && x.requires_grad();
  TensorT<T> out = TensorT<T>::zeros(x.shape(), rg);
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i)
    ov[i] = std::log(std::max(xv[i], static_cast<T>(kLogClamp)));
  detail::check_finite(out, "log");
  if (rg) {
    detail::record_node(tape, out, [x, out]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      auto xv2 = x.data();
      for (std::size_t i = 0; i < g.size(); ++i)
        if (xv2[i] > static_cast<T>(kLogClamp)) gx[i] += g[i] / xv2[i];
    });
  }
  return out;
}

// Temperature softmax over the last dimension, max-subtracted for stability.
template <class T>
TensorT<T> softmax_t(TapeT<T>& tape, const TensorT<T>& logits, T temperature) {
  if (!(temperature > T(0))) throw ParamError("softmax temperature must be > 0");
  const Shape& sh = logits.shape();
  if (sh.ndim() < 1) throw ShapeError("softmax_t needs at least 1 dim");
  const std::size_t c = static_cast<std::size_t>(sh[sh.ndim() - 1]);
  const std::size_t rows = logits.numel() / c;
  bool rg = tape.recording() && logits.requires_grad();
  TensorT<T> out = TensorT<T>::zeros(sh, rg);
  auto zv = logits.data();
  auto ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* z = &zv[r * c];
    T* o = &ov[r * c];
    T m = z[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, z[j]);
    T sum = T(0);
    for (std::size_t j = 0; j < c; ++j) {
      o[j] = std::exp((z[j] - m) / temperature);
      sum += o[j];
    }
    T inv = T(1) / sum;
    for (std::size_t j = 0; j < c; ++j) o[j] *= inv;
  }
  detail::check_finite(out, "softmax_t");
  if (rg) {
    detail::record_node(tape, out, [logits, out, temperature, rows, c]() mutable {
      auto g = out.grad();
      auto gz = logits.grad();
      auto ov2 = out.data();
      for (std::size_t r = 0; r < rows; ++r) {
        const T* o = &ov2[r * c];
        const T* go = &g[r * c];
        T* gzr = &gz[r * c];
        T dot = T(0);
        for (std::size_t j = 0; j < c; ++j) dot += go[j] * o[j];
        for (std::size_t j = 0; j < c; ++j) gzr[j] += o[j] * (go[j] - dot) / temperature;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

// Cross-correlation on B,H,W,C maps with input-dilated kernel taps.
// weight is [kh,kw,Cin,Cout]; the Cout-contiguous layout keeps the hot inner
// loops on contiguous memory in both directions.
template <class T>
TensorT<T> conv2d(TapeT<T>& tape, const TensorT<T>& input, const TensorT<T>& weight,
                  const TensorT<T>& bias, int stride, int dilation, int padding) {
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  if (is.ndim() != 4) throw ShapeError("conv2d input must be 4-D, got " + is.str());
  if (ws.ndim() != 4) throw ShapeError("conv2d weight must be 4-D, got " + ws.str());
  const int b = is[0], h = is[1], w = is[2], cin = is[3];
  const int kh = ws[0], kw = ws[1], wcin = ws[2], cout = ws[3];
  if (kh % 2 == 0 || kw % 2 == 0) throw ParamError("conv2d kernel extents must be odd");
  if (stride < 1) throw ParamError("conv2d stride must be >= 1");
  if (dilation < 1) throw ParamError("conv2d dilation must be >= 1");
  if (padding < 0) throw ParamError("conv2d padding must be >= 0");
  if (wcin != cin)
    throw ShapeError("conv2d input channels " + std::to_string(cin) + " vs weight Cin " +
                     std::to_string(wcin));
  if (bias.shape() != Shape{cout})
    throw ShapeError("conv2d bias must be [Cout]=" + std::to_string(cout) + ", got " +
                     bias.shape().str());
  const int span_h = dilation * (kh - 1) + 1;
  const int span_w = dilation * (kw - 1) + 1;
  const int oh = (h + 2 * padding - span_h) / stride + 1;
  const int ow = (w + 2 * padding - span_w) / stride + 1;
  if (oh <= 0 || ow <= 0)
    throw ShapeError("conv2d produces empty output for input " + is.str());

  bool rg = tape.recording() &&
            (input.requires_grad() || weight.requires_grad() || bias.requires_grad());
  TensorT<T> out = TensorT<T>::zeros(Shape{b, oh, ow, cout}, rg);
  {
    auto xv = input.data();
    auto wv = weight.data();
    auto bv = bias.data();
    auto ov = out.data();
    for (int n = 0; n < b; ++n) {
      for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
          T* acc = &ov[(((static_cast<std::size_t>(n) * oh + y) * ow + x) * cout)];
          for (int co = 0; co < cout; ++co) acc[co] = bv[co];
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = y * stride - padding + ky * dilation;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = x * stride - padding + kx * dilation;
              if (ix < 0 || ix >= w) continue;
              const T* in_px = &xv[(((static_cast<std::size_t>(n) * h + iy) * w + ix) * cin)];
              const T* w_px = &wv[((static_cast<std::size_t>(ky) * kw + kx) * cin) * cout];
              for (int ci = 0; ci < cin; ++ci) {
                const T v = in_px[ci];
                const T* wrow = &w_px[static_cast<std::size_t>(ci) * cout];
                for (int co = 0; co < cout; ++co) acc[co] += v * wrow[co];
              }
            }
          }
        }
      }
    }
  }
  detail::check_finite(out, "conv2d");

  if (rg) {
    detail::record_node(tape, out, [input, weight, bias, out, stride, dilation, padding]() mutable {
      const Shape& is2 = input.shape();
      const Shape& ws2 = weight.shape();
      const Shape& os2 = out.shape();
      const int b2 = is2[0], h2 = is2[1], w2 = is2[2], cin2 = is2[3];
      const int kh2 = ws2[0], kw2 = ws2[1], cout2 = ws2[3];
      const int oh2 = os2[1], ow2 = os2[2];
      auto g = out.grad();
      auto xv = input.data();
      auto wv = weight.data();
      const bool need_dx = input.requires_grad();
      const bool need_dw = weight.requires_grad();
      const bool need_db = bias.requires_grad();
      auto gx = input.grad();
      auto gw = weight.grad();
      auto gb = bias.grad();
      for (int n = 0; n < b2; ++n) {
        for (int y = 0; y < oh2; ++y) {
          for (int x = 0; x < ow2; ++x) {
            const T* gpx = &g[(((static_cast<std::size_t>(n) * oh2 + y) * ow2 + x) * cout2)];
            if (need_db)
              for (int co = 0; co < cout2; ++co) gb[static_cast<std::size_t>(co)] += gpx[co];
            for (int ky = 0; ky < kh2; ++ky) {
              const int iy = y * stride - padding + ky * dilation;
              if (iy < 0 || iy >= h2) continue;
              for (int kx = 0; kx < kw2; ++kx) {
                const int ix = x * stride - padding + kx * dilation;
                if (ix < 0 || ix >= w2) continue;
                const std::size_t in_off =
                    ((static_cast<std::size_t>(n) * h2 + iy) * w2 + ix) * cin2;
                const std::size_t w_off =
                    (static_cast<std::size_t>(ky) * kw2 + kx) * cin2 * cout2;
                if (need_dx) {
                  for (int ci = 0; ci < cin2; ++ci) {
                    const T* wrow = &wv[w_off + static_cast<std::size_t>(ci) * cout2];
                    T acc = T(0);
                    for (int co = 0; co < cout2; ++co) acc += gpx[co] * wrow[co];
                    gx[in_off + static_cast<std::size_t>(ci)] += acc;
                  }
                }
                if (need_dw) {
                  for (int ci = 0; ci < cin2; ++ci) {
                    const T v = xv[in_off + static_cast<std::size_t>(ci)];
                    T* gwrow = &gw[w_off + static_cast<std::size_t>(ci) * cout2];
                    for (int co = 0; co < cout2; ++co) gwrow[co] += v * gpx[co];
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Resampling and reductions
// ---------------------------------------------------------------------------

// Half-pixel bilinear resampling of B,H,W,C maps, edge-clamped.
template <class T>
TensorT<T> bilinear_resize(TapeT<T>& tape, const TensorT<T>& x, int out_h, int out_w) {
  const Shape& is = x.shape();
  if (is.ndim() != 4) throw ShapeError("bilinear_resize input must be 4-D, got " + is.str());
  if (out_h < 1 || out_w < 1) throw ParamError("bilinear_resize target must be positive");
  const int b = is[0], h = is[1], w = is[2], c = is[3];
  bool rg = tape.recording() && x.requires_grad();
  TensorT<T> out = TensorT<T>::zeros(Shape{b, out_h, out_w, c}, rg);

  struct Tap {
    int lo, hi;
    T w_lo, w_hi;
  };
  auto make_taps = [](int src, int dst) {
    std::vector<Tap> taps(static_cast<std::size_t>(dst));
    const double scale = static_cast<double>(src) / dst;
    for (int i = 0; i < dst; ++i) {
      double pos = (i + 0.5) * scale - 0.5;
      pos = std::clamp(pos, 0.0, static_cast<double>(src - 1));
      int lo = static_cast<int>(std::floor(pos));
      int hi = std::min(lo + 1, src - 1);
      double f = pos - lo;
      taps[static_cast<std::size_t>(i)] = {lo, hi, static_cast<T>(1.0 - f), static_cast<T>(f)};
    }
    return taps;
  };
  const auto ty = make_taps(h, out_h);
  const auto tx = make_taps(w, out_w);

  auto xv = x.data();
  auto ov = out.data();
  for (int n = 0; n < b; ++n) {
    for (int y = 0; y < out_h; ++y) {
      const Tap& py = ty[static_cast<std::size_t>(y)];
      for (int xo = 0; xo < out_w; ++xo) {
        const Tap& px = tx[static_cast<std::size_t>(xo)];
        const T* p00 = &xv[(((static_cast<std::size_t>(n) * h + py.lo) * w + px.lo) * c)];
        const T* p01 = &xv[(((static_cast<std::size_t>(n) * h + py.lo) * w + px.hi) * c)];
        const T* p10 = &xv[(((static_cast<std::size_t>(n) * h + py.hi) * w + px.lo) * c)];
        const T* p11 = &xv[(((static_cast<std::size_t>(n) * h + py.hi) * w + px.hi) * c)];
        T* o = &ov[(((static_cast<std::size_t>(n) * out_h + y) * out_w + xo) * c)];
        for (int ch = 0; ch < c; ++ch) {
          o[ch] = py.w_lo * (px.w_lo * p00[ch] + px.w_hi * p01[ch]) +
                  py.w_hi * (px.w_lo * p10[ch] + px.w_hi * p11[ch]);
        }
      }
    }
  }
  detail::check_finite(out, "bilinear_resize");

  if (rg) {
    detail::record_node(tape, out, [x, out, ty, tx]() mutable {
      const Shape& is2 = x.shape();
      const Shape& os2 = out.shape();
      const int b2 = is2[0], h2 = is2[1], w2 = is2[2], c2 = is2[3];
      const int oh2 = os2[1], ow2 = os2[2];
      auto g = out.grad();
      auto gx = x.grad();
      for (int n = 0; n < b2; ++n) {
        for (int y = 0; y < oh2; ++y) {
          const Tap& py = ty[static_cast<std::size_t>(y)];
          for (int xo = 0; xo < ow2; ++xo) {
            const Tap& px = tx[static_cast<std::size_t>(xo)];
            const T* go = &g[(((static_cast<std::size_t>(n) * oh2 + y) * ow2 + xo) * c2)];
            T* g00 = &gx[(((static_cast<std::size_t>(n) * h2 + py.lo) * w2 + px.lo) * c2)];
            T* g01 = &gx[(((static_cast<std::size_t>(n) * h2 + py.lo) * w2 + px.hi) * c2)];
            T* g10 = &gx[(((static_cast<std::size_t>(n) * h2 + py.hi) * w2 + px.lo) * c2)];
            T* g11 = &gx[(((static_cast<std::size_t>(n) * h2 + py.hi) * w2 + px.hi) * c2)];
            for (int ch = 0; ch < c2; ++ch) {
              g00[ch] += py.w_lo * px.w_lo * go[ch];
              g01[ch] += py.w_lo * px.w_hi * go[ch];
              g10[ch] += py.w_hi * px.w_lo * go[ch];
              g11[ch] += py.w_hi * px.w_hi * go[ch];
            }
          }
        }
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> matmul(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.ndim() != 2 || bs.ndim() != 2)
    throw ShapeError("matmul expects 2-D operands, got " + as.str() + " and " + bs.str());
  if (as[1] != bs[0]) throw ShapeError("matmul inner dims " + as.str() + " x " + bs.str());
  const int m = as[0], k = as[1], n = bs[1];
  bool rg = tape.recording() && (a.requires_grad() || b.requires_grad());
  TensorT<T> out = TensorT<T>::zeros(Shape{m, n}, rg);
  auto av = a.data();
  auto bv = b.data();
  auto ov = out.data();
  for (int i = 0; i < m; ++i) {
    for (int kk = 0; kk < k; ++kk) {
      const T v = av[static_cast<std::size_t>(i) * k + kk];
      const T* brow = &bv[static_cast<std::size_t>(kk) * n];
      T* orow = &ov[static_cast<std::size_t>(i) * n];
      for (int j = 0; j < n; ++j) orow[j] += v * brow[j];
    }
  }
  detail::check_finite(out, "matmul");
  if (rg) {
    detail::record_node(tape, out, [a, b, out, m, k, n]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto ga = a.grad();
        auto bv2 = b.data();
        for (int i = 0; i < m; ++i)
          for (int kk = 0; kk < k; ++kk) {
            const T* brow = &bv2[static_cast<std::size_t>(kk) * n];
            const T* grow = &g[static_cast<std::size_t>(i) * n];
            T acc = T(0);
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            ga[static_cast<std::size_t>(i) * k + kk] += acc;
          }
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        auto av2 = a.data();
        for (int kk = 0; kk < k; ++kk)
          for (int i = 0; i < m; ++i) {
            const T v = av2[static_cast<std::size_t>(i) * k + kk];
            const T* grow = &g[static_cast<std::size_t>(i) * n];
            T* gbrow = &gb[static_cast<std::size_t>(kk) * n];
            for (int j = 0; j < n; ++j) gbrow[j] += v * grow[j];
          }
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> transpose2d(TapeT<T>& tape, const TensorT<T>& a) {
  const Shape& as = a.shape();
  if (as.ndim() != 2) throw ShapeError("transpose2d expects 2-D, got " + as.str());
  const int m = as[0], n = as[1];
  bool rg = tape.recording() && a.requires_grad();
  TensorT<T> out = TensorT<T>::zeros(Shape{n, m}, rg);
  auto av = a.data();
  auto ov = out.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      ov[static_cast<std::size_t>(j) * m + i] = av[static_cast<std::size_t>(i) * n + j];
  if (rg) {
    detail::record_node(tape, out, [a, out, m, n]() mutable {
      auto g = out.grad();
      auto ga = a.grad();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          ga[static_cast<std::size_t>(i) * n + j] += g[static_cast<std::size_t>(j) * m + i];
    });
  }
  return out;
}

// Sum over the last (channel) dimension: [..., C] -> [..., 1].
template <class T>
TensorT<T> channel_sum(TapeT<T>& tape, const TensorT<T>& x) {
  const Shape& sh = x.shape();
  if (sh.ndim() < 1) throw ShapeError("channel_sum needs at least 1 dim");
  const std::size_t c = static_cast<std::size_t>(sh[sh.ndim() - 1]);
  const std::size_t rows = x.numel() / c;
  std::array<int, 4> dims{};
  for (int i = 0; i < sh.ndim() - 1; ++i) dims[static_cast<std::size_t>(i)] = sh[i];
  Shape os;
  switch (sh.ndim()) {
    case 1: os = Shape{1}; break;
    case 2: os = Shape{dims[0], 1}; break;
    case 3: os = Shape{dims[0], dims[1], 1}; break;
    default: os = Shape{dims[0], dims[1], dims[2], 1}; break;
  }
  bool rg = tape.recording() && x.requires_grad();
  TensorT<T> out = TensorT<T>::zeros(os, rg);
  auto xv = x.data();
  auto ov = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = T(0);
    for (std::size_t j = 0; j < c; ++j) acc += xv[r * c + j];
    ov[r] = acc;
  }
  if (rg) {
    detail::record_node(tape, out, [x, out, rows, c]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) gx[r * c + j] += g[r];
    });
  }
  return out;
}

// Sum over spatial positions: [B,H,W,C] -> [B,C].
template <class T>
TensorT<T> spatial_sum(TapeT<T>& tape, const TensorT<T>& x) {
  const Shape& sh = x.shape();
  if (sh.ndim() != 4) throw ShapeError("spatial_sum expects 4-D, got " + sh.str());
  const int b = sh[0], h = sh[1], w = sh[2], c = sh[3];
  bool rg = tape.recording() && x.requires_grad();
  TensorT<T> out = TensorT<T>::zeros(Shape{b, c}, rg);
  auto xv = x.data();
  auto ov = out.data();
  for (int n = 0; n < b; ++n) {
    T* orow = &ov[static_cast<std::size_t>(n) * c];
    const T* base = &xv[static_cast<std::size_t>(n) * h * w * c];
    for (int p = 0; p < h * w; ++p)
      for (int ch = 0; ch < c; ++ch) orow[ch] += base[static_cast<std::size_t>(p) * c + ch];
  }
  if (rg) {
    detail::record_node(tape, out, [x, out, b, h, w, c]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (int n = 0; n < b; ++n) {
        const T* grow = &g[static_cast<std::size_t>(n) * c];
        T* base = &gx[static_cast<std::size_t>(n) * h * w * c];
        for (int p = 0; p < h * w; ++p)
          for (int ch = 0; ch < c; ++ch) base[static_cast<std::size_t>(p) * c + ch] += grow[ch];
      }
    });
  }
  return out;
}

template <class T>
TensorT<T> sum_all(TapeT<T>& tape, const TensorT<T>& x) {
  bool rg = tape.recording() && x.requires_grad();
  TensorT<T> out = TensorT<T>::zeros(Shape{}, rg);
  auto xv = x.data();
  T acc = T(0);
  for (T v : xv) acc += v;
  out.data()[0] = acc;
  if (rg) {
    detail::record_node(tape, out, [x, out]() mutable {
      const T g = out.grad()[0];
      auto gx = x.grad();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
  }
  return out;
}

template <class T>
TensorT<T> reshape(TapeT<T>& tape, const TensorT<T>& x, Shape shape) {
  if (shape.numel() != x.numel())
    throw ShapeError("reshape " + x.shape().str() + " -> " + shape.str());
  bool rg = tape.recording() && x.requires_grad();
  TensorT<T> out = TensorT<T>::zeros(shape, rg);
  auto xv = x.data();
  auto ov = out.data();
  std::copy(xv.begin(), xv.end(), ov.begin());
  if (rg) {
    detail::record_node(tape, out, [x, out]() mutable {
      auto g = out.grad();
      auto gx = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return out;
}

// Squared Frobenius distance: sum((a-b)^2) over all elements, scalar output.
template <class T>
TensorT<T> frobenius_sq(TapeT<T>& tape, const TensorT<T>& a, const TensorT<T>& b) {
  detail::require_same_shape(a, b, "frobenius_sq");
  bool rg = tape.recording() && (a.requires_grad() || b.requires_grad());
  TensorT<T> out = TensorT<T>::zeros(Shape{}, rg);
  auto av = a.data(), bv = b.data();
  T acc = T(0);
  for (std::size_t i = 0; i < av.size(); ++i) {
    const T d = av[i] - bv[i];
    acc += d * d;
  }
  out.data()[0] = acc;
  detail::check_finite(out, "frobenius_sq");
  if (rg) {
    detail::record_node(tape, out, [a, b, out]() mutable {
      const T g = out.grad()[0];
      auto av2 = a.data(), bv2 = b.data();
      if (a.requires_grad()) {
        auto ga = a.grad();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += T(2) * (av2[i] - bv2[i]) * g;
      }
      if (b.requires_grad()) {
        auto gb = b.grad();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= T(2) * (av2[i] - bv2[i]) * g;
      }
    });
  }
  return out;
}

// Divide each row of a 2-D matrix by its L2 norm. An all-zero row stays zero
// (gradient zero there too); the similarity losses specify this fallback.
template <class T>
TensorT<T> row_l2_normalize(TapeT<T>& tape, const TensorT<T>& m) {
  const Shape& sh = m.shape();
  if (sh.ndim() != 2) throw ShapeError("row_l2_normalize expects 2-D, got " + sh.str());
  const int rows = sh[0], cols = sh[1];
  bool rg = tape.recording() && m.requires_grad();
  TensorT<T> out = TensorT<T>::zeros(sh, rg);
  std::vector<T> norms(static_cast<std::size_t>(rows), T(0));
  auto mv = m.data();
  auto ov = out.data();
  for (int r = 0; r < rows; ++r) {
    const T* row = &mv[static_cast<std::size_t>(r) * cols];
    T nsq = T(0);
    for (int j = 0; j < cols; ++j) nsq += row[j] * row[j];
    const T norm = std::sqrt(nsq);
    norms[static_cast<std::size_t>(r)] = norm;
    T* orow = &ov[static_cast<std::size_t>(r) * cols];
    if (norm > T(0)) {
      for (int j = 0; j < cols; ++j) orow[j] = row[j] / norm;
    } else {
      log_debug("row_l2_normalize: zero row ", r, " left as zeros");
    }
  }
  if (rg) {
    detail::record_node(tape, out, [m, out, norms, rows, cols]() mutable {
      auto g = out.grad();
      auto gm = m.grad();
      auto ov2 = out.data();
      for (int r = 0; r < rows; ++r) {
        const T norm = norms[static_cast<std::size_t>(r)];
        if (!(norm > T(0))) continue;
        const T* grow = &g[static_cast<std::size_t>(r) * cols];
        const T* yrow = &ov2[static_cast<std::size_t>(r) * cols];
        T* gmrow = &gm[static_cast<std::size_t>(r) * cols];
        T dot = T(0);
        for (int j = 0; j < cols; ++j) dot += grow[j] * yrow[j];
        for (int j = 0; j < cols; ++j) gmrow[j] += (grow[j] - dot * yrow[j]) / norm;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reverse accumulation
// ---------------------------------------------------------------------------

// Seeds d(loss)/d(loss) = 1 and replays the tape suffix in reverse. Leaves
// that the loss does not reach keep their zero grad. A loss with no recorded
// graph (all-constant inputs) is a no-op.
template <class T>
void backward(TapeT<T>& tape, const TensorT<T>& loss) {
  if (loss.numel() != 1) throw ParamError("backward requires a scalar loss");
  if (!loss.requires_grad()) return;
  if (loss.tape_of() != &tape || loss.node_index() == TapeT<T>::npos)
    throw ParamError("backward: loss tensor was not produced on this tape");
  TensorT<T> l = loss;
  l.grad()[0] += T(1);
  tape.run_backward_from(loss.node_index());
}

}  // namespace kdseg
