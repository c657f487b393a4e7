#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <map>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "iternet/param_store.hpp"
#include "iternet/tensor.hpp"

namespace iternet {

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const basic_tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
};

/// Linear record of forward operations for reverse-mode differentiation.
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    basic_tensor<T> value;
    basic_tensor<T> grad;
    BackwardFn backward;
    bool needs_grad = false;
    bool grad_ready = false;
    ParamEntry<T>* param = nullptr;
    std::string param_name;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(basic_tensor<T> value) {
    Node node;
    node.op = "const";
    node.value = std::move(value);
    return push(std::move(node));
  }

  /// Leaf bound to a store entry. Repeated requests for the same name return
  /// the same node so every use site feeds one accumulator.
  Var<T> param(ParamStore<T>& store, const std::string& name) {
    auto key = std::make_pair(static_cast<const void*>(&store), name);
    if (auto it = param_ids_.find(key); it != param_ids_.end()) {
      return Var<T>{this, it->second};
    }
    ParamEntry<T>& entry = store.at(name);
    Node node;
    node.op = "param";
    node.value = entry.value;
    node.needs_grad = true;
    node.param = &entry;
    node.param_name = name;
    Var<T> v = push(std::move(node));
    param_ids_.emplace(std::move(key), v.id);
    return v;
  }

  /// Read-only binding: the value enters the tape but receives no gradient.
  Var<T> param(const ParamStore<T>& store, const std::string& name) {
    auto key = std::make_pair(static_cast<const void*>(&store), name);
    if (auto it = param_ids_.find(key); it != param_ids_.end()) {
      return Var<T>{this, it->second};
    }
    Node node;
    node.op = "param";
    node.value = store.value(name);
    node.param_name = name;
    Var<T> v = push(std::move(node));
    param_ids_.emplace(std::move(key), v.id);
    return v;
  }

  Var<T> record(std::string op, std::vector<std::size_t> inputs,
                basic_tensor<T> value, BackwardFn backward) {
    Node node;
    node.op = std::move(op);
    for (std::size_t in : inputs) node.needs_grad |= nodes_.at(in).needs_grad;
    node.inputs = std::move(inputs);
    node.value = std::move(value);
    if (node.needs_grad) node.backward = std::move(backward);
    return push(std::move(node));
  }

  const basic_tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Gradient buffer of a node, allocated zeroed on first access.
  basic_tensor<T>& grad(std::size_t id) {
    Node& n = nodes_.at(id);
    if (!n.grad_ready) {
      n.grad = basic_tensor<T>(n.value.shape());
      n.grad_ready = true;
    }
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return nodes_.at(id).grad_ready; }

  /// Propagates d(loss)/d(node) to every node and adds parameter gradients
  /// into their store entries.
  void backward(Var<T> loss) {
    if (loss.tape != this || loss.id >= nodes_.size()) {
      throw std::invalid_argument("backward: loss node is not on this tape");
    }
    if (nodes_[loss.id].value.size() != 1) {
      throw std::invalid_argument("backward: loss must be scalar, got " +
                                  shape_string(nodes_[loss.id].value.shape()));
    }
    grad(loss.id).fill(T{1});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.needs_grad || !has_grad(i)) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) n.param->grad += n.grad;
    }
  }

 private:
  Var<T> push(Node node) {
    nodes_.push_back(std::move(node));
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::map<std::pair<const void*, std::string>, std::size_t> param_ids_;
};

enum class Padding { same, valid };

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::size_t n, c, h, w, o, kh, kw, ho, wo, pad_h, pad_w;
};

inline void require_rank4(const Shape& s, const char* op, const char* what) {
  if (s.size() != 4) {
    throw std::invalid_argument(std::string(op) + ": " + what +
                                " must be rank 4, got " + shape_string(s));
  }
}

inline ConvGeometry conv_geometry(const Shape& in, const Shape& k,
                                  const Shape& b, Padding padding) {
  require_rank4(in, "conv2d", "input");
  require_rank4(k, "conv2d", "kernel");
  if (k[1] != in[1]) {
    throw std::invalid_argument("conv2d: kernel " + shape_string(k) +
                                " in-channels do not match input " +
                                shape_string(in));
  }
  if (b.size() != 1 || b[0] != k[0]) {
    throw std::invalid_argument("conv2d: bias " + shape_string(b) +
                                " does not match kernel " + shape_string(k));
  }
  ConvGeometry g{in[0], in[1], in[2], in[3], k[0], k[2], k[3], 0, 0, 0, 0};
  if (padding == Padding::same) {
    if (g.kh % 2 == 0 || g.kw % 2 == 0) {
      throw std::invalid_argument("conv2d: same padding needs odd kernel, got " +
                                  shape_string(k));
    }
    g.pad_h = g.kh / 2;
    g.pad_w = g.kw / 2;
    g.ho = g.h;
    g.wo = g.w;
  } else {
    if (g.kh > g.h || g.kw > g.w) {
      throw std::invalid_argument("conv2d: kernel " + shape_string(k) +
                                  " larger than input " + shape_string(in));
    }
    g.ho = g.h - g.kh + 1;
    g.wo = g.w - g.kw + 1;
  }
  return g;
}

// Output columns [lo, hi) read in-bounds source columns for kernel column kx.
inline void valid_range(const ConvGeometry& g, std::size_t kx, std::size_t& lo,
                        std::size_t& hi) {
  lo = g.pad_w > kx ? g.pad_w - kx : 0;
  const std::size_t limit = g.w + g.pad_w - kx;  // first x with x + kx - pad >= w
  hi = std::min(g.wo, limit);
  if (hi < lo) hi = lo;
}

// Fills col (c*kh*kw rows, (y1-y0)*wo columns) for output rows [y0, y1).
template <typename T>
void im2col(const T* img, const ConvGeometry& g, std::size_t y0, std::size_t y1, T* col) {
  const std::size_t cols = (y1 - y0) * g.wo;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = col + ((c * g.kh + ky) * g.kw + kx) * cols;
        std::size_t lo, hi;
        valid_range(g, kx, lo, hi);
        for (std::size_t y = y0; y < y1; ++y) {
          const long sy = static_cast<long>(y + ky) - static_cast<long>(g.pad_h);
          T* dst = row + (y - y0) * g.wo;
          if (sy < 0 || sy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wo, T{0});
            continue;
          }
          const T* src = img + (c * g.h + static_cast<std::size_t>(sy)) * g.w;
          std::fill(dst, dst + lo, T{0});
          std::copy(src + (lo + kx - g.pad_w), src + (hi + kx - g.pad_w), dst + lo);
          std::fill(dst + hi, dst + g.wo, T{0});
        }
      }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, std::size_t y0, std::size_t y1, T* img) {
  const std::size_t cols = (y1 - y0) * g.wo;
  for (std::size_t c = 0; c < g.c; ++c)
    for (std::size_t ky = 0; ky < g.kh; ++ky)
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = col + ((c * g.kh + ky) * g.kw + kx) * cols;
        std::size_t lo, hi;
        valid_range(g, kx, lo, hi);
        for (std::size_t y = y0; y < y1; ++y) {
          const long sy = static_cast<long>(y + ky) - static_cast<long>(g.pad_h);
          if (sy < 0 || sy >= static_cast<long>(g.h)) continue;
          T* dst = img + (c * g.h + static_cast<std::size_t>(sy)) * g.w;
          const T* src = row + (y - y0) * g.wo;
          for (std::size_t x = lo; x < hi; ++x) dst[x + kx - g.pad_w] += src[x];
        }
      }
}

// Output rows per im2col tile; keeps the column buffer cache resident.
inline std::size_t tile_rows(const ConvGeometry& g) {
  constexpr std::size_t budget = 32768;
  const std::size_t per_row = g.c * g.kh * g.kw * g.wo;
  return std::clamp<std::size_t>(budget / std::max<std::size_t>(per_row, 1), 1, g.ho);
}

template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

/// Per-thread scratch buffer reused across convolutions.
template <typename T>
T* scratch(std::size_t slot, std::size_t n) {
  thread_local aligned_vector<T> buffers[2];
  auto& b = buffers[slot];
  if (b.size() < n) b.resize(n);
  return b.data();
}

inline bool is_pointwise(const ConvGeometry& g) {
  return g.kh == 1 && g.kw == 1;
}

template <typename T>
T stable_sigmoid(T z) {
  if (z >= T{0}) return T{1} / (T{1} + std::exp(-z));
  const T e = std::exp(z);
  return e / (T{1} + e);
}

}  // namespace detail

/// Cross-correlation plus bias over every batch item.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> kernel, Var<T> bias, Padding padding) {
  Tape<T>& tape = *x.tape;
  const detail::ConvGeometry g =
      detail::conv_geometry(x.shape(), kernel.shape(), bias.shape(), padding);
  const std::size_t ckk = g.c * g.kh * g.kw;
  const std::size_t plane = g.ho * g.wo;
  const std::size_t rows = detail::tile_rows(g);

  basic_tensor<T> out(Shape{g.n, g.o, g.ho, g.wo});
  {
    const auto& xin = x.value();
    detail::ConstMatMap<T> k(kernel.value().data(), g.o, ckk);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> b(bias.value().data(), g.o);
    T* col = detail::is_pointwise(g) ? nullptr : detail::scratch<T>(0, ckk * rows * g.wo);
    for (std::size_t n = 0; n < g.n; ++n) {
      const T* img = xin.data() + n * g.c * g.h * g.w;
      T* dst = out.data() + n * g.o * plane;
      if (!col) {
        detail::MatMap<T> y(dst, g.o, plane);
        y.noalias() = k * detail::ConstMatMap<T>(img, ckk, plane);
        y.colwise() += b;
        continue;
      }
      for (std::size_t y0 = 0; y0 < g.ho; y0 += rows) {
        const std::size_t y1 = std::min(g.ho, y0 + rows);
        const std::size_t cols = (y1 - y0) * g.wo;
        detail::im2col(img, g, y0, y1, col);
        detail::StridedMap<T> y(dst + y0 * g.wo, g.o, cols, Eigen::OuterStride<>(plane));
        y.noalias() = k * detail::ConstMatMap<T>(col, ckk, cols);
        y.colwise() += b;
      }
    }
  }

  const std::size_t xi = x.id, ki = kernel.id, bi = bias.id;
  return tape.record(
      "conv2d", {xi, ki, bi}, std::move(out),
      [g, xi, ki, bi, ckk, plane, rows](Tape<T>& t, std::size_t self) {
        const basic_tensor<T>& gy = t.grad(self);
        const basic_tensor<T>& xin = t.value(xi);
        const bool want_x = t.needs_grad(xi);
        const bool want_k = t.needs_grad(ki);
        const bool want_b = t.needs_grad(bi);
        detail::ConstMatMap<T> k(t.value(ki).data(), g.o, ckk);
        T* dk = want_k ? t.grad(ki).data() : nullptr;
        T* dx = want_x ? t.grad(xi).data() : nullptr;
        if (want_b) {
          Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> db(t.grad(bi).data(), g.o);
          for (std::size_t n = 0; n < g.n; ++n) {
            db += detail::ConstMatMap<T>(gy.data() + n * g.o * plane, g.o, plane).rowwise().sum();
          }
        }
        if (!want_k && !want_x) return;
        if (detail::is_pointwise(g)) {
          for (std::size_t n = 0; n < g.n; ++n) {
            detail::ConstMatMap<T> dy(gy.data() + n * g.o * plane, g.o, plane);
            if (dk) {
              detail::ConstMatMap<T> xm(xin.data() + n * g.c * plane, ckk, plane);
              detail::MatMap<T>(dk, g.o, ckk).noalias() += dy * xm.transpose();
            }
            if (dx) detail::MatMap<T>(dx + n * g.c * plane, ckk, plane).noalias() += k.transpose() * dy;
          }
          return;
        }
        T* col = dk ? detail::scratch<T>(0, ckk * rows * g.wo) : nullptr;
        T* dcol = dx ? detail::scratch<T>(1, ckk * rows * g.wo) : nullptr;
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* img = xin.data() + n * g.c * g.h * g.w;
          for (std::size_t y0 = 0; y0 < g.ho; y0 += rows) {
            const std::size_t y1 = std::min(g.ho, y0 + rows);
            const std::size_t cols = (y1 - y0) * g.wo;
            detail::ConstStridedMap<T> dy(gy.data() + n * g.o * plane + y0 * g.wo, g.o, cols,
                                          Eigen::OuterStride<>(plane));
            if (dk) {
              detail::im2col(img, g, y0, y1, col);
              detail::MatMap<T>(dk, g.o, ckk).noalias() +=
                  dy * detail::ConstMatMap<T>(col, ckk, cols).transpose();
            }
            if (dx) {
              detail::MatMap<T>(dcol, ckk, cols).noalias() = k.transpose() * dy;
              detail::col2im_add(dcol, g, y0, y1, dx + n * g.c * g.h * g.w);
            }
          }
        }
      });
}

/// 2x2 max pooling, stride 2. Ties route the gradient to the first maximum
/// in row-major window order.
template <typename T>
Var<T> max_pool_2x2(Var<T> x) {
  const Shape& s = x.shape();
  detail::require_rank4(s, "max_pool_2x2", "input");
  if (s[2] % 2 != 0 || s[3] % 2 != 0) {
    throw std::invalid_argument("max_pool_2x2: spatial size must be even, got " +
                                shape_string(s));
  }
  const std::size_t ho = s[2] / 2, wo = s[3] / 2;
  basic_tensor<T> out(Shape{s[0], s[1], ho, wo});
  std::vector<std::size_t> argmax(out.size());
  const basic_tensor<T>& in = x.value();
  std::size_t oi = 0;
  for (std::size_t n = 0; n < s[0]; ++n)
    for (std::size_t c = 0; c < s[1]; ++c)
      for (std::size_t y = 0; y < ho; ++y)
        for (std::size_t xw = 0; xw < wo; ++xw, ++oi) {
          std::size_t best = ((n * s[1] + c) * s[2] + 2 * y) * s[3] + 2 * xw;
          const std::size_t cand[3] = {best + 1, best + s[3], best + s[3] + 1};
          for (std::size_t q : cand)
            if (in[q] > in[best]) best = q;
          out[oi] = in[best];
          argmax[oi] = best;
        }
  const std::size_t xi = x.id;
  return x.tape->record("max_pool_2x2", {xi}, std::move(out),
                        [xi, argmax = std::move(argmax)](Tape<T>& t, std::size_t self) {
                          const basic_tensor<T>& gy = t.grad(self);
                          basic_tensor<T>& gx = t.grad(xi);
                          for (std::size_t i = 0; i < gy.size(); ++i) gx[argmax[i]] += gy[i];
                        });
}

/// Nearest-neighbour 2x replication.
template <typename T>
Var<T> upsample_nearest2x(Var<T> x) {
  const Shape& s = x.shape();
  detail::require_rank4(s, "upsample_nearest2x", "input");
  const std::size_t h = s[2], w = s[3];
  basic_tensor<T> out(Shape{s[0], s[1], 2 * h, 2 * w});
  const basic_tensor<T>& in = x.value();
  for (std::size_t p = 0; p < s[0] * s[1]; ++p)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xw = 0; xw < 2 * w; ++xw)
        out[(p * 2 * h + y) * 2 * w + xw] = in[(p * h + y / 2) * w + xw / 2];
  const std::size_t xi = x.id;
  return x.tape->record("upsample_nearest2x", {xi}, std::move(out),
                        [xi, s](Tape<T>& t, std::size_t self) {
                          const std::size_t h = s[2], w = s[3];
                          const basic_tensor<T>& gy = t.grad(self);
                          basic_tensor<T>& gx = t.grad(xi);
                          for (std::size_t p = 0; p < s[0] * s[1]; ++p)
                            for (std::size_t y = 0; y < 2 * h; ++y)
                              for (std::size_t xw = 0; xw < 2 * w; ++xw)
                                gx[(p * h + y / 2) * w + xw / 2] +=
                                    gy[(p * 2 * h + y) * 2 * w + xw];
                        });
}

/// Decoder upsampling: nearest-neighbour 2x followed by a same-padded conv.
template <typename T>
Var<T> upsample2x_conv(Var<T> x, Var<T> kernel, Var<T> bias) {
  return conv2d(upsample_nearest2x(x), kernel, bias, Padding::same);
}

/// Joins tensors along the channel axis in argument order.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const Shape& s0 = parts.front().shape();
  detail::require_rank4(s0, "concat_channels", "input");
  std::size_t channels = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    detail::require_rank4(s, "concat_channels", "input");
    if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3]) {
      throw std::invalid_argument("concat_channels: incompatible shapes " +
                                  shape_string(s0) + " and " + shape_string(s));
    }
    channels += s[1];
    ids.push_back(p.id);
    widths.push_back(s[1]);
  }
  const std::size_t n = s0[0], plane = s0[2] * s0[3];
  basic_tensor<T> out(Shape{n, channels, s0[2], s0[3]});
  for (std::size_t b = 0; b < n; ++b) {
    std::size_t offset = 0;
    for (std::size_t i = 0; i < parts.size(); ++i) {
      const T* src = parts[i].value().data() + b * widths[i] * plane;
      std::copy(src, src + widths[i] * plane,
                out.data() + (b * channels + offset) * plane);
      offset += widths[i];
    }
  }
  Tape<T>& tape = *parts.front().tape;
  return tape.record(
      "concat_channels", ids, std::move(out),
      [ids, widths, n, channels, plane](Tape<T>& t, std::size_t self) {
        const basic_tensor<T>& gy = t.grad(self);
        std::size_t offset = 0;
        for (std::size_t i = 0; i < ids.size(); ++i) {
          if (t.needs_grad(ids[i])) {
            basic_tensor<T>& gx = t.grad(ids[i]);
            for (std::size_t b = 0; b < n; ++b) {
              const T* src = gy.data() + (b * channels + offset) * plane;
              T* dst = gx.data() + b * widths[i] * plane;
              for (std::size_t j = 0; j < widths[i] * plane; ++j) dst[j] += src[j];
            }
          }
          offset += widths[i];
        }
      });
}

template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  return concat_channels<T>(std::vector<Var<T>>{a, b});
}

template <typename T>
Var<T> relu(Var<T> x) {
  basic_tensor<T> out = x.value();
  for (auto& v : out.values()) v = v > T{0} ? v : T{0};
  const std::size_t xi = x.id;
  return x.tape->record("relu", {xi}, std::move(out), [xi](Tape<T>& t, std::size_t self) {
    const basic_tensor<T>& gy = t.grad(self);
    const basic_tensor<T>& in = t.value(xi);
    basic_tensor<T>& gx = t.grad(xi);
    for (std::size_t i = 0; i < gy.size(); ++i)
      if (in[i] > T{0}) gx[i] += gy[i];
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  basic_tensor<T> out = x.value();
  for (auto& v : out.values()) v = detail::stable_sigmoid(v);
  const std::size_t xi = x.id;
  return x.tape->record("sigmoid", {xi}, std::move(out), [xi](Tape<T>& t, std::size_t self) {
    const basic_tensor<T>& gy = t.grad(self);
    const basic_tensor<T>& y = t.value(self);
    basic_tensor<T>& gx = t.grad(xi);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * y[i] * (T{1} - y[i]);
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  a.value().require_same_shape(b.value(), "add");
  basic_tensor<T> out = a.value();
  out += b.value();
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record("add", {ai, bi}, std::move(out), [ai, bi](Tape<T>& t, std::size_t self) {
    const basic_tensor<T> gy = t.grad(self);
    if (t.needs_grad(ai)) t.grad(ai) += gy;
    if (t.needs_grad(bi)) t.grad(bi) += gy;
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  a.value().require_same_shape(b.value(), "mul");
  basic_tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ai = a.id, bi = b.id;
  return a.tape->record("mul", {ai, bi}, std::move(out), [ai, bi](Tape<T>& t, std::size_t self) {
    const basic_tensor<T>& gy = t.grad(self);
    if (t.needs_grad(ai)) {
      basic_tensor<T>& ga = t.grad(ai);
      const basic_tensor<T>& bv = t.value(bi);
      for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bv[i];
    }
    if (t.needs_grad(bi)) {
      basic_tensor<T>& gb = t.grad(bi);
      const basic_tensor<T>& av = t.value(ai);
      for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  basic_tensor<T> out = x.value();
  for (auto& v : out.values()) v *= factor;
  const std::size_t xi = x.id;
  return x.tape->record("scale", {xi}, std::move(out), [xi, factor](Tape<T>& t, std::size_t self) {
    const basic_tensor<T>& gy = t.grad(self);
    basic_tensor<T>& gx = t.grad(xi);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * factor;
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  T acc{0};
  for (T v : x.value().values()) acc += v;
  const std::size_t xi = x.id;
  return x.tape->record("sum", {xi}, basic_tensor<T>::scalar(acc),
                        [xi](Tape<T>& t, std::size_t self) {
                          const T g = t.grad(self)[0];
                          for (auto& v : t.grad(xi).values()) v += g;
                        });
}

/// Mean binary cross entropy of sigmoid(logits) against 0/1 labels over the
/// pixels where mask == 1, evaluated as log(1+exp(-|z|)) + max(z,0) - z*y.
template <typename T>
Var<T> sigmoid_cross_entropy(Var<T> logits, const basic_tensor<T>& labels,
                             const basic_tensor<T>* mask = nullptr) {
  const basic_tensor<T>& z = logits.value();
  z.require_same_shape(labels, "sigmoid_cross_entropy labels");
  if (mask) z.require_same_shape(*mask, "sigmoid_cross_entropy mask");
  std::size_t count = 0;
  double acc = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (mask && (*mask)[i] == T{0}) continue;
    const double zi = z[i], yi = labels[i];
    acc += std::log1p(std::exp(-std::abs(zi))) + std::max(zi, 0.0) - zi * yi;
    ++count;
  }
  if (count == 0) {
    throw std::invalid_argument("sigmoid_cross_entropy: mask selects no pixels");
  }
  const T loss = static_cast<T>(acc / static_cast<double>(count));
  std::optional<basic_tensor<T>> mask_copy;
  if (mask) mask_copy = *mask;
  const std::size_t li = logits.id;
  return logits.tape->record(
      "sigmoid_cross_entropy", {li}, basic_tensor<T>::scalar(loss),
      [li, labels, mask_copy = std::move(mask_copy), count](Tape<T>& t, std::size_t self) {
        const T g = t.grad(self)[0] / static_cast<T>(count);
        const basic_tensor<T>& zv = t.value(li);
        basic_tensor<T>& gz = t.grad(li);
        for (std::size_t i = 0; i < zv.size(); ++i) {
          if (mask_copy && (*mask_copy)[i] == T{0}) continue;
          gz[i] += g * (detail::stable_sigmoid(zv[i]) - labels[i]);
        }
      });
}

}  // namespace iternet
