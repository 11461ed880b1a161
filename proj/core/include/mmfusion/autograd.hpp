#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mmfusion/tensor.hpp"

namespace mmfusion {

template <Real T>
class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <Real T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::uint32_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::uint32_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

  const Tensor<T>& value() const;
  const Shape& dims() const { return value().dims(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  std::size_t numel() const { return value().numel(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/// Reverse-mode gradient tape.
///
/// Every operation appends a node holding its value and a closure that maps
/// the node's output gradient onto its inputs' gradients. Nodes are created in
/// topological order, so backward() is a single reverse sweep. A tape built
/// with `record = false` keeps values only (forward evaluation).
template <Real T>
class Tape {
 public:
  /// Receives the output gradient and one gradient slot per input, in input
  /// order. A slot is null when that input does not need a gradient.
  using Backward = std::function<void(const Tensor<T>& out_grad, std::span<Tensor<T>*> in_grads)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const noexcept { return record_; }

  Var<T> constant(Tensor<T> value);
  /// Leaf whose gradient is kept on the tape (read it back with grad()).
  Var<T> variable(Tensor<T> value);
  /// Leaf bound to a ParamStore entry; backward() accumulates into its grad slot.
  /// Repeated requests for the same entry return the same node.
  Var<T> param(ParamStore<T>& store, const std::string& name);

  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, Backward backward);
  Var<T> record(Tensor<T> value, std::span<const Var<T>> inputs, Backward backward);

  /// Seeds d(root)/d(root) = 1. The root must hold exactly one scalar.
  void backward(Var<T> root);

  const Tensor<T>& value(std::uint32_t id) const { return nodes_[id].value; }
  /// Gradient after backward(); empty if the node was not reached.
  const Tensor<T>& grad(Var<T> v) const { return nodes_[v.id()].grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<std::uint32_t> inputs;
    Backward backward;
    bool needs_grad = false;
    ParamStore<T>* store = nullptr;
    std::string param_name;
  };

  Var<T> push(Node node);

  bool record_;
  // deque keeps node references stable while the tape grows.
  std::deque<Node> nodes_;
  std::map<std::pair<const ParamStore<T>*, std::string>, std::uint32_t> param_nodes_;
};

template <Real T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}

// ---------------------------------------------------------------------------
// Differentiable operations. All shape checks throw ShapeError naming both
// operands.

template <Real T> Var<T> add(Var<T> a, Var<T> b);
template <Real T> Var<T> sub(Var<T> a, Var<T> b);
template <Real T> Var<T> mul(Var<T> a, Var<T> b);
template <Real T> Var<T> scale(Var<T> a, T factor);
template <Real T> Var<T> relu(Var<T> a);
template <Real T> Var<T> sigmoid(Var<T> a);
template <Real T> Var<T> reshape(Var<T> a, Shape dims);
template <Real T> Var<T> sum(Var<T> a);

/// [n x k] * [k x m]
template <Real T> Var<T> matmul(Var<T> a, Var<T> b);
/// [n x k] * [m x k]^T
template <Real T> Var<T> matmul_nt(Var<T> a, Var<T> b);
template <Real T> Var<T> transpose(Var<T> a);

/// y[i,k] = sum_j x[i,j] * weight[k,j] + bias[k]
template <Real T> Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias);
template <Real T> Var<T> linear(Var<T> x, Var<T> weight);

/// Softmax over the last axis with max subtraction. Non-finite input throws NumericError.
template <Real T> Var<T> softmax(Var<T> x);

/// out[r] = x[index[r]] for rank-2 x.
template <Real T> Var<T> gather_rows(Var<T> x, std::span<const std::uint32_t> index);
/// out[segment[r]] += x[r]; rows accumulate in input order.
template <Real T>
Var<T> segment_sum(Var<T> x, std::span<const std::uint32_t> segment, std::size_t segments);
/// Per-column softmax over the rows sharing a segment id.
template <Real T>
Var<T> segment_softmax(Var<T> x, std::span<const std::uint32_t> segment, std::size_t segments);

/// x: C_in x H x W, weight: C_out x C_in x k x k, bias: C_out. Zero padding.
template <Real T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, std::size_t stride, std::size_t padding);

/// Sparse 1-D resampling operator: output cell i = sum of weight * input[index]
/// over taps[i]. Applied per axis by resample2d.
template <Real T>
struct ResampleAxis {
  struct Tap {
    std::uint32_t index;
    T weight;
  };
  std::size_t in_len = 0;
  std::size_t out_len = 0;
  std::vector<std::vector<Tap>> taps;

  /// out_len x in_len dense matrix (for inspection and tests).
  Tensor<T> dense() const;

  /// Output cell i averages input window [floor(i*in/out), ceil((i+1)*in/out)).
  static ResampleAxis adaptive_pool(std::size_t in_len, std::size_t out_len);
  /// Linear interpolation with align_corners = false, edge clamped.
  static ResampleAxis bilinear(std::size_t in_len, std::size_t out_len);
  /// Pooling when out_len <= in_len, bilinear when the axis must grow.
  static ResampleAxis adaptive(std::size_t in_len, std::size_t out_len);
};

/// Separable resampling of a C x H x W map, rows along H and cols along W.
template <Real T>
Var<T> resample2d(Var<T> x, const ResampleAxis<T>& rows, const ResampleAxis<T>& cols);

/// Adaptive average pooling to (out_h, out_w); an axis asked to grow falls back to bilinear.
template <Real T> Var<T> avg_pool2d(Var<T> x, std::size_t out_h, std::size_t out_w);
/// Bilinear resize, corner alignment disabled.
template <Real T> Var<T> upsample2d(Var<T> x, std::size_t out_h, std::size_t out_w);
/// Per-axis: pool when shrinking, bilinear when growing.
template <Real T> Var<T> adaptive_resize2d(Var<T> x, std::size_t out_h, std::size_t out_w);

/// linear2(relu(linear1(x))) with parameters `{prefix}.w1/b1/w2/b2`.
template <Real T>
Var<T> fc_block(Var<T> x, const FcBlockSpec& spec, ParamStore<T>& params, const std::string& prefix);

/// Per-location linear map over a C x H x W map (1x1 convolution) with `{prefix}.w/b`.
template <Real T>
Var<T> conv1x1(Var<T> x, ParamStore<T>& params, const std::string& prefix);

/// C x H x W map -> (H*W) x C token rows (row-major over H, W).
template <Real T> Var<T> map_to_tokens(Var<T> x);
/// (H*W) x C token rows -> C x H x W map.
template <Real T> Var<T> tokens_to_map(Var<T> tokens, std::size_t h, std::size_t w);

}  // namespace mmfusion
