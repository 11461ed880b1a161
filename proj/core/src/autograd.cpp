#include "mmfusion/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace mmfusion {

// ---------------------------------------------------------------------------
// Tape

template <Real T>
Var<T> Tape<T>::push(Node node) {
  if (nodes_.size() >= std::numeric_limits<std::uint32_t>::max()) {
    throw NumericError("tape exceeds node capacity");
  }
  nodes_.push_back(std::move(node));
  return Var<T>(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

template <Real T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node node;
  node.value = std::move(value);
  return push(std::move(node));
}

template <Real T>
Var<T> Tape<T>::variable(Tensor<T> value) {
  Node node;
  node.value = std::move(value);
  node.needs_grad = record_;
  return push(std::move(node));
}

template <Real T>
Var<T> Tape<T>::param(ParamStore<T>& store, const std::string& name) {
  const auto key = std::make_pair(static_cast<const ParamStore<T>*>(&store), name);
  if (auto it = param_nodes_.find(key); it != param_nodes_.end()) return Var<T>(this, it->second);
  Node node;
  node.value = store.value(name);
  node.needs_grad = record_;
  if (record_) {
    node.store = &store;
    node.param_name = name;
  }
  Var<T> v = push(std::move(node));
  param_nodes_.emplace(key, v.id());
  return v;
}

template <Real T>
Var<T> Tape<T>::record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward) {
  return record(std::move(value), std::span<const Var<T>>(inputs.begin(), inputs.size()),
                std::move(backward));
}

template <Real T>
Var<T> Tape<T>::record(Tensor<T> value, std::span<const Var<T>> inputs, Backward backward) {
  Node node;
  node.value = std::move(value);
  if (record_) {
    for (const Var<T>& in : inputs) {
      if (&in.tape() != this) throw ShapeError("operand recorded on a different tape");
      node.inputs.push_back(in.id());
      node.needs_grad = node.needs_grad || nodes_[in.id()].needs_grad;
    }
    if (node.needs_grad) node.backward = std::move(backward);
  }
  return push(std::move(node));
}

template <Real T>
void Tape<T>::backward(Var<T> root) {
  if (!record_) throw NumericError("backward() on a tape that does not record");
  Node& top = nodes_[root.id()];
  if (top.value.numel() != 1) {
    throw ShapeError("backward() root must be scalar, got " + shape_string(top.value.dims()));
  }
  top.grad = Tensor<T>::full(top.value.dims(), T(1));
  std::vector<Tensor<T>*> slots;
  for (std::int64_t id = root.id(); id >= 0; --id) {
    Node& node = nodes_[static_cast<std::size_t>(id)];
    if (!node.needs_grad || node.grad.empty()) continue;
    if (node.backward) {
      slots.clear();
      for (std::uint32_t in : node.inputs) {
        Node& input = nodes_[in];
        if (!input.needs_grad) {
          slots.push_back(nullptr);
          continue;
        }
        if (input.grad.empty()) input.grad = Tensor<T>(input.value.dims());
        slots.push_back(&input.grad);
      }
      node.backward(node.grad, slots);
    }
    if (node.store != nullptr) {
      auto dst = node.store->grad(node.param_name).data();
      auto src = node.grad.data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

template <Real T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.dims() != b.dims()) {
    throw ShapeError(std::string(op) + ": operand dims " + shape_string(a.dims()) + " and " +
                     shape_string(b.dims()) + " differ");
  }
}

template <Real T>
void require_rank(const Var<T>& a, std::size_t rank, const char* op, const char* what) {
  if (a.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + shape_string(a.dims()));
  }
}

}  // namespace

template <Real T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same(a, b, "add");
  Tensor<T> out = a.value();
  auto bv = b.value().data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] += bv[i];
  return a.tape().record(std::move(out), {a, b}, [](const Tensor<T>& g, std::span<Tensor<T>*> in) {
    for (Tensor<T>* slot : in) {
      if (!slot) continue;
      auto s = slot->data();
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
    }
  });
}

template <Real T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same(a, b, "sub");
  Tensor<T> out = a.value();
  auto bv = b.value().data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] -= bv[i];
  return a.tape().record(std::move(out), {a, b}, [](const Tensor<T>& g, std::span<Tensor<T>*> in) {
    if (in[0]) {
      auto s = in[0]->data();
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
    }
    if (in[1]) {
      auto s = in[1]->data();
      for (std::size_t i = 0; i < s.size(); ++i) s[i] -= g[i];
    }
  });
}

template <Real T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same(a, b, "mul");
  Tensor<T> out = a.value();
  auto bv = b.value().data();
  auto ov = out.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] *= bv[i];
  return a.tape().record(std::move(out), {a, b}, [a, b](const Tensor<T>& g, std::span<Tensor<T>*> in) {
    auto av = a.value().data();
    auto bv = b.value().data();
    if (in[0]) {
      auto s = in[0]->data();
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * bv[i];
    }
    if (in[1]) {
      auto s = in[1]->data();
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * av[i];
    }
  });
}

template <Real T>
Var<T> scale(Var<T> a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= factor;
  return a.tape().record(std::move(out), {a}, [factor](const Tensor<T>& g, std::span<Tensor<T>*> in) {
    auto s = in[0]->data();
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * factor;
  });
}

template <Real T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = v > T(0) ? v : T(0);
  return a.tape().record(std::move(out), {a}, [a](const Tensor<T>& g, std::span<Tensor<T>*> in) {
    auto x = a.value().data();
    auto s = in[0]->data();
    // Subgradient at 0 is 0.
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (x[i] > T(0)) s[i] += g[i];
    }
  });
}

template <Real T>
Var<T> sigmoid(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = T(1) / (T(1) + std::exp(-v));
  auto y = std::make_shared<Tensor<T>>(out);
  return a.tape().record(std::move(out), {a}, [y](const Tensor<T>& g, std::span<Tensor<T>*> in) {
    auto s = in[0]->data();
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * (*y)[i] * (T(1) - (*y)[i]);
  });
}

template <Real T>
Var<T> reshape(Var<T> a, Shape dims) {
  Tensor<T> out = a.value().reshaped(std::move(dims));
  return a.tape().record(std::move(out), {a}, [](const Tensor<T>& g, std::span<Tensor<T>*> in) {
    auto s = in[0]->data();
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
  });
}

template <Real T>
Var<T> sum(Var<T> a) {
  T total = 0;
  for (T v : a.value().data()) total += v;
  return a.tape().record(Tensor<T>::scalar(total), {a}, [](const Tensor<T>& g, std::span<Tensor<T>*> in) {
    for (auto& s : in[0]->data()) s += g[0];
  });
}

// ---------------------------------------------------------------------------
// Matrix products

template <Real T>
Var<T> matmul(Var<T> a, Var<T> b) {
  require_rank(a, 2, "matmul", "lhs");
  require_rank(b, 2, "matmul", "rhs");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: lhs " + shape_string(a.dims()) + " and rhs " + shape_string(b.dims()) +
                     " do not conform");
  }
  Tensor<T> out({n, m});
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t l = 0; l < k; ++l) {
      const T x = av.at(i, l);
      const T* brow = &bv[l * m];
      T* orow = &out[i * m];
      for (std::size_t j = 0; j < m; ++j) orow[j] += x * brow[j];
    }
  }
  return a.tape().record(std::move(out), {a, b}, [a, b, n, k, m](const Tensor<T>& g, std::span<Tensor<T>*> in) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (in[0]) {
      auto& ga = *in[0];
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t l = 0; l < k; ++l) {
          T acc = 0;
          for (std::size_t j = 0; j < m; ++j) acc += g[i * m + j] * bv[l * m + j];
          ga[i * k + l] += acc;
        }
    }
    if (in[1]) {
      auto& gb = *in[1];
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t l = 0; l < k; ++l) {
          const T x = av[i * k + l];
          for (std::size_t j = 0; j < m; ++j) gb[l * m + j] += x * g[i * m + j];
        }
    }
  });
}

template <Real T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  require_rank(a, 2, "matmul_nt", "lhs");
  require_rank(b, 2, "matmul_nt", "rhs");
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt: lhs " + shape_string(a.dims()) + " and rhs " +
                     shape_string(b.dims()) + " do not conform");
  }
  Tensor<T> out({n, m});
  const auto& av = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      T acc = 0;
      for (std::size_t l = 0; l < k; ++l) acc += av[i * k + l] * bv[j * k + l];
      out[i * m + j] = acc;
    }
  return a.tape().record(std::move(out), {a, b}, [a, b, n, k, m](const Tensor<T>& g, std::span<Tensor<T>*> in) {
    const auto& av = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        const T gij = g[i * m + j];
        if (gij == T(0)) continue;
        if (in[0])
          for (std::size_t l = 0; l < k; ++l) (*in[0])[i * k + l] += gij * bv[j * k + l];
        if (in[1])
          for (std::size_t l = 0; l < k; ++l) (*in[1])[j * k + l] += gij * av[i * k + l];
      }
  });
}

template <Real T>
Var<T> transpose(Var<T> a) {
  require_rank(a, 2, "transpose", "operand");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor<T> out({c, r});
  const auto& av = a.value();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = av[i * c + j];
  return a.tape().record(std::move(out), {a}, [r, c](const Tensor<T>& g, std::span<Tensor<T>*> in) {
    auto& s = *in[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) s[i * c + j] += g[j * r + i];
  });
}

template <Real T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  require_rank(x, 2, "linear", "input");
  require_rank(weight, 2, "linear", "weight");
  const std::size_t n = x.dim(0), din = x.dim(1), dout = weight.dim(0);
  if (weight.dim(1) != din) {
    throw ShapeError("linear: input " + shape_string(x.dims()) + " and weight " +
                     shape_string(weight.dims()) + " do not conform");
  }
  const bool has_bias = bias.valid();
  if (has_bias && (bias.value().rank() != 1 || bias.dim(0) != dout)) {
    throw ShapeError("linear: weight " + shape_string(weight.dims()) + " and bias " +
                     shape_string(bias.dims()) + " do not conform");
  }
  Tensor<T> out({n, dout});
  const auto& xv = x.value();
  const auto& wv = weight.value();
  for (std::size_t i = 0; i < n; ++i) {
    const T* xr = &xv[i * din];
    for (std::size_t o = 0; o < dout; ++o) {
      const T* wr = &wv[o * din];
      T acc = 0;
      for (std::size_t j = 0; j < din; ++j) acc += xr[j] * wr[j];
      out[i * dout + o] = has_bias ? acc + bias.value()[o] : acc;
    }
  }
  auto backward = [x, weight, n, din, dout, has_bias](const Tensor<T>& g, std::span<Tensor<T>*> in) {
    const auto& xv = x.value();
    const auto& wv = weight.value();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t o = 0; o < dout; ++o) {
        const T gio = g[i * dout + o];
        if (in[0])
          for (std::size_t j = 0; j < din; ++j) (*in[0])[i * din + j] += gio * wv[o * din + j];
        if (in[1])
          for (std::size_t j = 0; j < din; ++j) (*in[1])[o * din + j] += gio * xv[i * din + j];
        if (has_bias && in[2]) (*in[2])[o] += gio;
      }
    }
  };
  if (has_bias) return x.tape().record(std::move(out), {x, weight, bias}, backward);
  return x.tape().record(std::move(out), {x, weight}, backward);
}

template <Real T>
Var<T> linear(Var<T> x, Var<T> weight) {
  return linear(x, weight, Var<T>{});
}

// ---------------------------------------------------------------------------
// Softmax and segment ops

template <Real T>
Var<T> softmax(Var<T> x) {
  const auto& xv = x.value();
  if (xv.rank() == 0 || xv.numel() == 0) throw ShapeError("softmax: empty operand");
  if (!xv.all_finite()) throw NumericError("softmax: non-finite input");
  const std::size_t m = xv.dims().back();
  const std::size_t rows = xv.numel() / m;
  Tensor<T> out(xv.dims());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = &xv[r * m];
    T* o = &out[r * m];
    const T peak = *std::max_element(in, in + m);
    T total = 0;
    for (std::size_t j = 0; j < m; ++j) {
      o[j] = std::exp(in[j] - peak);
      total += o[j];
    }
    for (std::size_t j = 0; j < m; ++j) o[j] /= total;
  }
  auto y = std::make_shared<Tensor<T>>(out);
  return x.tape().record(std::move(out), {x}, [y, rows, m](const Tensor<T>& g, std::span<Tensor<T>*> in) {
    auto& s = *in[0];
    for (std::size_t r = 0; r < rows; ++r) {
      T dot = 0;
      for (std::size_t j = 0; j < m; ++j) dot += g[r * m + j] * (*y)[r * m + j];
      for (std::size_t j = 0; j < m; ++j) s[r * m + j] += (*y)[r * m + j] * (g[r * m + j] - dot);
    }
  });
}

template <Real T>
Var<T> gather_rows(Var<T> x, std::span<const std::uint32_t> index) {
  require_rank(x, 2, "gather_rows", "operand");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor<T> out({index.size(), cols});
  const auto& xv = x.value();
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= rows) {
      throw ShapeError("gather_rows: index " + std::to_string(index[r]) + " outside operand " +
                       shape_string(x.dims()));
    }
    std::copy_n(&xv[index[r] * cols], cols, &out[r * cols]);
  }
  std::vector<std::uint32_t> idx(index.begin(), index.end());
  return x.tape().record(std::move(out), {x}, [idx = std::move(idx), cols](const Tensor<T>& g, std::span<Tensor<T>*> in) {
    auto& s = *in[0];
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < cols; ++c) s[idx[r] * cols + c] += g[r * cols + c];
  });
}

template <Real T>
Var<T> segment_sum(Var<T> x, std::span<const std::uint32_t> segment, std::size_t segments) {
  require_rank(x, 2, "segment_sum", "operand");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (segment.size() != rows) {
    throw ShapeError("segment_sum: " + std::to_string(segment.size()) + " segment ids for operand " +
                     shape_string(x.dims()));
  }
  Tensor<T> out({segments, cols});
  const auto& xv = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    if (segment[r] >= segments) throw ShapeError("segment_sum: segment id out of range");
    for (std::size_t c = 0; c < cols; ++c) out[segment[r] * cols + c] += xv[r * cols + c];
  }
  std::vector<std::uint32_t> seg(segment.begin(), segment.end());
  return x.tape().record(std::move(out), {x}, [seg = std::move(seg), cols](const Tensor<T>& g, std::span<Tensor<T>*> in) {
    auto& s = *in[0];
    for (std::size_t r = 0; r < seg.size(); ++r)
      for (std::size_t c = 0; c < cols; ++c) s[r * cols + c] += g[seg[r] * cols + c];
  });
}

template <Real T>
Var<T> segment_softmax(Var<T> x, std::span<const std::uint32_t> segment, std::size_t segments) {
  require_rank(x, 2, "segment_softmax", "operand");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (segment.size() != rows) throw ShapeError("segment_softmax: segment ids do not match rows");
  const auto& xv = x.value();
  if (!xv.all_finite()) throw NumericError("segment_softmax: non-finite input");
  std::vector<T> peak(segments * cols, -std::numeric_limits<T>::infinity());
  for (std::size_t r = 0; r < rows; ++r) {
    if (segment[r] >= segments) throw ShapeError("segment_softmax: segment id out of range");
    for (std::size_t c = 0; c < cols; ++c)
      peak[segment[r] * cols + c] = std::max(peak[segment[r] * cols + c], xv[r * cols + c]);
  }
  Tensor<T> out(xv.dims());
  std::vector<T> total(segments * cols, T(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      const T e = std::exp(xv[r * cols + c] - peak[segment[r] * cols + c]);
      out[r * cols + c] = e;
      total[segment[r] * cols + c] += e;
    }
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= total[segment[r] * cols + c];
  auto y = std::make_shared<Tensor<T>>(out);
  std::vector<std::uint32_t> seg(segment.begin(), segment.end());
  return x.tape().record(std::move(out), {x}, [y, seg = std::move(seg), cols, segments](const Tensor<T>& g, std::span<Tensor<T>*> in) {
    std::vector<T> dot(segments * cols, T(0));
    for (std::size_t r = 0; r < seg.size(); ++r)
      for (std::size_t c = 0; c < cols; ++c) dot[seg[r] * cols + c] += g[r * cols + c] * (*y)[r * cols + c];
    auto& s = *in[0];
    for (std::size_t r = 0; r < seg.size(); ++r)
      for (std::size_t c = 0; c < cols; ++c)
        s[r * cols + c] += (*y)[r * cols + c] * (g[r * cols + c] - dot[seg[r] * cols + c]);
  });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

// Output columns [lo, hi) whose input column ow*stride + kw - pad lies in [0, width).
inline void valid_range(std::size_t out_len, std::size_t in_len, std::size_t stride, std::size_t pad,
                        std::size_t k, std::size_t& lo, std::size_t& hi) {
  const std::int64_t shift = static_cast<std::int64_t>(k) - static_cast<std::int64_t>(pad);
  const std::int64_t s = static_cast<std::int64_t>(stride);
  std::int64_t first = shift >= 0 ? 0 : (-shift + s - 1) / s;
  std::int64_t last = (static_cast<std::int64_t>(in_len) - 1 - shift);
  last = last < 0 ? -1 : last / s;
  lo = static_cast<std::size_t>(std::max<std::int64_t>(first, 0));
  hi = static_cast<std::size_t>(std::clamp<std::int64_t>(last + 1, 0, static_cast<std::int64_t>(out_len)));
  if (hi < lo) hi = lo;
}

}  // namespace

template <Real T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, std::size_t stride, std::size_t padding) {
  require_rank(x, 3, "conv2d", "input");
  require_rank(weight, 4, "conv2d", "weight");
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin || weight.dim(3) != k) {
    throw ShapeError("conv2d: input " + shape_string(x.dims()) + " and weight " +
                     shape_string(weight.dims()) + " do not conform");
  }
  if (bias.value().rank() != 1 || bias.dim(0) != cout) {
    throw ShapeError("conv2d: weight " + shape_string(weight.dims()) + " and bias " +
                     shape_string(bias.dims()) + " do not conform");
  }
  if (stride == 0) throw ConfigError("conv2d: stride must be >= 1");
  if (h + 2 * padding < k || w + 2 * padding < k) {
    throw ShapeError("conv2d: input " + shape_string(x.dims()) + " smaller than kernel " +
                     shape_string(weight.dims()));
  }
  const std::size_t ho = (h + 2 * padding - k) / stride + 1;
  const std::size_t wo = (w + 2 * padding - k) / stride + 1;

  std::vector<std::size_t> col_lo(k), col_hi(k);
  for (std::size_t kw = 0; kw < k; ++kw) valid_range(wo, w, stride, padding, kw, col_lo[kw], col_hi[kw]);

  Tensor<T> out({cout, ho, wo});
  const auto& xv = x.value();
  const auto& wv = weight.value();
  const auto& bv = bias.value();
  for (std::size_t co = 0; co < cout; ++co) {
    T* oplane = &out[co * ho * wo];
    std::fill(oplane, oplane + ho * wo, bv[co]);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const T* iplane = &xv[ci * h * w];
      for (std::size_t kh = 0; kh < k; ++kh) {
        for (std::size_t oh = 0; oh < ho; ++oh) {
          const std::int64_t ih = static_cast<std::int64_t>(oh * stride + kh) - static_cast<std::int64_t>(padding);
          if (ih < 0 || ih >= static_cast<std::int64_t>(h)) continue;
          const T* irow = iplane + static_cast<std::size_t>(ih) * w;
          T* orow = oplane + oh * wo;
          for (std::size_t kw = 0; kw < k; ++kw) {
            const T wt = wv[((co * cin + ci) * k + kh) * k + kw];
            const std::int64_t shift = static_cast<std::int64_t>(kw) - static_cast<std::int64_t>(padding);
            for (std::size_t ow = col_lo[kw]; ow < col_hi[kw]; ++ow)
              orow[ow] += wt * irow[static_cast<std::int64_t>(ow * stride) + shift];
          }
        }
      }
    }
  }
  auto backward = [x, weight, cin, h, w, cout, k, ho, wo, stride, padding, col_lo, col_hi](
                      const Tensor<T>& g, std::span<Tensor<T>*> in) {
    const auto& xv = x.value();
    const auto& wv = weight.value();
    for (std::size_t co = 0; co < cout; ++co) {
      const T* gplane = &g[co * ho * wo];
      if (in[2]) {
        T acc = 0;
        for (std::size_t i = 0; i < ho * wo; ++i) acc += gplane[i];
        (*in[2])[co] += acc;
      }
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const T* iplane = &xv[ci * h * w];
        for (std::size_t kh = 0; kh < k; ++kh) {
          for (std::size_t kw = 0; kw < k; ++kw) {
            const std::size_t widx = ((co * cin + ci) * k + kh) * k + kw;
            const T wt = wv[widx];
            const std::int64_t shift = static_cast<std::int64_t>(kw) - static_cast<std::int64_t>(padding);
            T wacc = 0;
            for (std::size_t oh = 0; oh < ho; ++oh) {
              const std::int64_t ih = static_cast<std::int64_t>(oh * stride + kh) - static_cast<std::int64_t>(padding);
              if (ih < 0 || ih >= static_cast<std::int64_t>(h)) continue;
              const T* grow = gplane + oh * wo;
              const std::size_t ibase = ci * h * w + static_cast<std::size_t>(ih) * w;
              if (in[0]) {
                T* girow = &(*in[0])[ibase];
                for (std::size_t ow = col_lo[kw]; ow < col_hi[kw]; ++ow)
                  girow[static_cast<std::int64_t>(ow * stride) + shift] += wt * grow[ow];
              }
              if (in[1]) {
                const T* irow = iplane + static_cast<std::size_t>(ih) * w;
                for (std::size_t ow = col_lo[kw]; ow < col_hi[kw]; ++ow)
                  wacc += grow[ow] * irow[static_cast<std::int64_t>(ow * stride) + shift];
              }
            }
            if (in[1]) (*in[1])[widx] += wacc;
          }
        }
      }
    }
  };
  return x.tape().record(std::move(out), {x, weight, bias}, backward);
}

// ---------------------------------------------------------------------------
// Resampling

template <Real T>
Tensor<T> ResampleAxis<T>::dense() const {
  Tensor<T> m({out_len, in_len});
  for (std::size_t i = 0; i < out_len; ++i)
    for (const Tap& tap : taps[i]) m.at(i, tap.index) += tap.weight;
  return m;
}

template <Real T>
ResampleAxis<T> ResampleAxis<T>::adaptive_pool(std::size_t in_len, std::size_t out_len) {
  if (in_len == 0 || out_len == 0) throw ConfigError("adaptive pooling needs non-empty axes");
  ResampleAxis axis{in_len, out_len, {}};
  axis.taps.resize(out_len);
  for (std::size_t i = 0; i < out_len; ++i) {
    const std::size_t start = (i * in_len) / out_len;
    const std::size_t end = ((i + 1) * in_len + out_len - 1) / out_len;
    const T weight = T(1) / static_cast<T>(end - start);
    for (std::size_t j = start; j < end; ++j) axis.taps[i].push_back({static_cast<std::uint32_t>(j), weight});
  }
  return axis;
}

template <Real T>
ResampleAxis<T> ResampleAxis<T>::bilinear(std::size_t in_len, std::size_t out_len) {
  if (in_len == 0 || out_len == 0) throw ConfigError("bilinear resize needs non-empty axes");
  ResampleAxis axis{in_len, out_len, {}};
  axis.taps.resize(out_len);
  const double ratio = static_cast<double>(in_len) / static_cast<double>(out_len);
  for (std::size_t i = 0; i < out_len; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    std::size_t i0 = static_cast<std::size_t>(src);
    if (i0 > in_len - 1) i0 = in_len - 1;
    const std::size_t i1 = std::min(i0 + 1, in_len - 1);
    const double frac = src - static_cast<double>(i0);
    if (i1 == i0 || frac == 0.0) {
      axis.taps[i].push_back({static_cast<std::uint32_t>(i0), T(1)});
    } else {
      axis.taps[i].push_back({static_cast<std::uint32_t>(i0), static_cast<T>(1.0 - frac)});
      axis.taps[i].push_back({static_cast<std::uint32_t>(i1), static_cast<T>(frac)});
    }
  }
  return axis;
}

template <Real T>
ResampleAxis<T> ResampleAxis<T>::adaptive(std::size_t in_len, std::size_t out_len) {
  return out_len <= in_len ? adaptive_pool(in_len, out_len) : bilinear(in_len, out_len);
}

template <Real T>
Var<T> resample2d(Var<T> x, const ResampleAxis<T>& rows, const ResampleAxis<T>& cols) {
  require_rank(x, 3, "resample2d", "input");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (rows.in_len != h || cols.in_len != w) {
    throw ShapeError("resample2d: input " + shape_string(x.dims()) + " does not match resample axes [" +
                     std::to_string(rows.in_len) + "x" + std::to_string(cols.in_len) + "]");
  }
  const std::size_t ho = rows.out_len, wo = cols.out_len;
  Tensor<T> tmp({c, h, wo});
  const auto& xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i) {
      const T* xrow = &xv[(ch * h + i) * w];
      T* trow = &tmp[(ch * h + i) * wo];
      for (std::size_t j = 0; j < wo; ++j) {
        T acc = 0;
        for (const auto& tap : cols.taps[j]) acc += tap.weight * xrow[tap.index];
        trow[j] = acc;
      }
    }
  Tensor<T> out({c, ho, wo});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < ho; ++i) {
      T* orow = &out[(ch * ho + i) * wo];
      for (const auto& tap : rows.taps[i]) {
        const T* trow = &tmp[(ch * h + tap.index) * wo];
        for (std::size_t j = 0; j < wo; ++j) orow[j] += tap.weight * trow[j];
      }
    }
  return x.tape().record(std::move(out), {x}, [rows, cols, c, h, w, ho, wo](const Tensor<T>& g, std::span<Tensor<T>*> in) {
    Tensor<T> gtmp({c, h, wo});
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < ho; ++i) {
        const T* grow = &g[(ch * ho + i) * wo];
        for (const auto& tap : rows.taps[i]) {
          T* trow = &gtmp[(ch * h + tap.index) * wo];
          for (std::size_t j = 0; j < wo; ++j) trow[j] += tap.weight * grow[j];
        }
      }
    auto& gx = *in[0];
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < h; ++i) {
        const T* trow = &gtmp[(ch * h + i) * wo];
        T* xrow = &gx[(ch * h + i) * w];
        for (std::size_t j = 0; j < wo; ++j)
          for (const auto& tap : cols.taps[j]) xrow[tap.index] += tap.weight * trow[j];
      }
  });
}

namespace {

template <Real T>
void require_target(std::size_t out_h, std::size_t out_w, const char* op) {
  if (out_h == 0 || out_w == 0) throw ConfigError(std::string(op) + ": zero-sized output requested");
}

}  // namespace

template <Real T>
Var<T> avg_pool2d(Var<T> x, std::size_t out_h, std::size_t out_w) {
  require_target<T>(out_h, out_w, "avg_pool2d");
  require_rank(x, 3, "avg_pool2d", "input");
  return resample2d(x, ResampleAxis<T>::adaptive(x.dim(1), out_h), ResampleAxis<T>::adaptive(x.dim(2), out_w));
}

template <Real T>
Var<T> upsample2d(Var<T> x, std::size_t out_h, std::size_t out_w) {
  require_target<T>(out_h, out_w, "upsample2d");
  require_rank(x, 3, "upsample2d", "input");
  return resample2d(x, ResampleAxis<T>::bilinear(x.dim(1), out_h), ResampleAxis<T>::bilinear(x.dim(2), out_w));
}

template <Real T>
Var<T> adaptive_resize2d(Var<T> x, std::size_t out_h, std::size_t out_w) {
  return avg_pool2d(x, out_h, out_w);
}

// ---------------------------------------------------------------------------
// Layers

template <Real T>
Var<T> fc_block(Var<T> x, const FcBlockSpec& spec, ParamStore<T>& params, const std::string& prefix) {
  spec.validate();
  Tape<T>& tape = x.tape();
  if (x.value().rank() != 2 || x.dim(1) != spec.in_dim) {
    throw ShapeError("fc_block '" + prefix + "': input " + shape_string(x.dims()) +
                     " does not match in_dim " + std::to_string(spec.in_dim));
  }
  Var<T> w1 = tape.param(params, prefix + ".w1");
  Var<T> w2 = tape.param(params, prefix + ".w2");
  Var<T> b1 = spec.bias ? tape.param(params, prefix + ".b1") : Var<T>{};
  Var<T> b2 = spec.bias ? tape.param(params, prefix + ".b2") : Var<T>{};
  Var<T> hidden = relu(linear(x, w1, b1));
  return linear(hidden, w2, b2);
}

template <Real T>
Var<T> conv1x1(Var<T> x, ParamStore<T>& params, const std::string& prefix) {
  require_rank(x, 3, "conv1x1", "input");
  Tape<T>& tape = x.tape();
  Var<T> weight = tape.param(params, prefix + ".w");
  Var<T> bias = tape.param(params, prefix + ".b");
  const std::size_t cin = x.dim(0), hw = x.dim(1) * x.dim(2);
  if (weight.value().rank() != 2 || weight.dim(1) != cin || bias.dim(0) != weight.dim(0)) {
    throw ShapeError("conv1x1 '" + prefix + "': input " + shape_string(x.dims()) + " and weight " +
                     shape_string(weight.dims()) + " do not conform");
  }
  const std::size_t cout = weight.dim(0);
  Tensor<T> out({cout, x.dim(1), x.dim(2)});
  const auto& xv = x.value();
  const auto& wv = weight.value();
  const auto& bv = bias.value();
  for (std::size_t co = 0; co < cout; ++co) {
    T* orow = &out[co * hw];
    std::fill(orow, orow + hw, bv[co]);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const T wt = wv[co * cin + ci];
      const T* irow = &xv[ci * hw];
      for (std::size_t p = 0; p < hw; ++p) orow[p] += wt * irow[p];
    }
  }
  return tape.record(std::move(out), {x, weight, bias}, [x, weight, cin, cout, hw](const Tensor<T>& g, std::span<Tensor<T>*> in) {
    const auto& xv = x.value();
    const auto& wv = weight.value();
    for (std::size_t co = 0; co < cout; ++co) {
      const T* grow = &g[co * hw];
      if (in[2]) {
        T acc = 0;
        for (std::size_t p = 0; p < hw; ++p) acc += grow[p];
        (*in[2])[co] += acc;
      }
      for (std::size_t ci = 0; ci < cin; ++ci) {
        if (in[0]) {
          const T wt = wv[co * cin + ci];
          T* girow = &(*in[0])[ci * hw];
          for (std::size_t p = 0; p < hw; ++p) girow[p] += wt * grow[p];
        }
        if (in[1]) {
          const T* irow = &xv[ci * hw];
          T acc = 0;
          for (std::size_t p = 0; p < hw; ++p) acc += grow[p] * irow[p];
          (*in[1])[co * cin + ci] += acc;
        }
      }
    }
  });
}

template <Real T>
Var<T> map_to_tokens(Var<T> x) {
  require_rank(x, 3, "map_to_tokens", "input");
  return transpose(reshape(x, {x.dim(0), x.dim(1) * x.dim(2)}));
}

template <Real T>
Var<T> tokens_to_map(Var<T> tokens, std::size_t h, std::size_t w) {
  require_rank(tokens, 2, "tokens_to_map", "input");
  if (tokens.dim(0) != h * w) {
    throw ShapeError("tokens_to_map: " + shape_string(tokens.dims()) + " tokens cannot fill a " +
                     std::to_string(h) + "x" + std::to_string(w) + " grid");
  }
  const std::size_t c = tokens.dim(1);
  return reshape(transpose(tokens), {c, h, w});
}

// ---------------------------------------------------------------------------

#define MMFUSION_INSTANTIATE(T)                                                                  \
  template class Tape<T>;                                                                        \
  template struct ResampleAxis<T>;                                                               \
  template Var<T> add(Var<T>, Var<T>);                                                           \
  template Var<T> sub(Var<T>, Var<T>);                                                           \
  template Var<T> mul(Var<T>, Var<T>);                                                           \
  template Var<T> scale(Var<T>, T);                                                              \
  template Var<T> relu(Var<T>);                                                                  \
  template Var<T> sigmoid(Var<T>);                                                               \
  template Var<T> reshape(Var<T>, Shape);                                                        \
  template Var<T> sum(Var<T>);                                                                   \
  template Var<T> matmul(Var<T>, Var<T>);                                                        \
  template Var<T> matmul_nt(Var<T>, Var<T>);                                                     \
  template Var<T> transpose(Var<T>);                                                             \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                                \
  template Var<T> linear(Var<T>, Var<T>);                                                        \
  template Var<T> softmax(Var<T>);                                                               \
  template Var<T> gather_rows(Var<T>, std::span<const std::uint32_t>);                           \
  template Var<T> segment_sum(Var<T>, std::span<const std::uint32_t>, std::size_t);              \
  template Var<T> segment_softmax(Var<T>, std::span<const std::uint32_t>, std::size_t);          \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, std::size_t, std::size_t);                      \
  template Var<T> resample2d(Var<T>, const ResampleAxis<T>&, const ResampleAxis<T>&);            \
  template Var<T> avg_pool2d(Var<T>, std::size_t, std::size_t);                                  \
  template Var<T> upsample2d(Var<T>, std::size_t, std::size_t);                                  \
  template Var<T> adaptive_resize2d(Var<T>, std::size_t, std::size_t);                           \
  template Var<T> fc_block(Var<T>, const FcBlockSpec&, ParamStore<T>&, const std::string&);      \
  template Var<T> conv1x1(Var<T>, ParamStore<T>&, const std::string&);                           \
  template Var<T> map_to_tokens(Var<T>);                                                         \
  template Var<T> tokens_to_map(Var<T>, std::size_t, std::size_t);

MMFUSION_INSTANTIATE(float)
MMFUSION_INSTANTIATE(double)

#undef MMFUSION_INSTANTIATE

}  // namespace mmfusion
